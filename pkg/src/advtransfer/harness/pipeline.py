"""End-to-end experiment phases: train, attack, evaluate, report.

Every phase reads what the previous phases left in the output directory,
so the CLI can run them one at a time. All randomness is keyed off the
config's root seed, which makes outputs independent of ``jobs``.
"""
import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import metrics
from ..attack import run_attack
from ..classifiers import load_model, save_model, train
from ..core import (
    Purpose,
    RngStream,
    load_dataset,
    load_digits_dataset,
    load_perturbations,
    make_blobs,
    save_perturbations,
    split_dataset,
    validate_records,
)
from ..errors import (
    AttackError,
    AttackQualityError,
    DimensionError,
    DivergenceError,
    InsufficientSources,
    InvalidArguments,
)
from . import figures

log = logging.getLogger(__name__)

PHASES = ("train", "attack", "evaluate", "report")
MANIFEST_FORMAT = "advtransfer-manifest/1"
VARIANTS = ("targeted", "nontargeted")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _star(args):
    fn, rest = args[0], args[1:]
    return fn(*rest)


def _pmap(fn, arg_tuples, jobs):
    """Ordered map, in-process for ``jobs <= 1``; results never depend on ``jobs``."""
    tasks = [(fn, *a) for a in arg_tuples]
    if jobs <= 1 or len(tasks) <= 1:
        return [_star(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_star, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def surrogate_name(i):
    return f"s{i}"


def target_name(family, j):
    return f"{family}_{j:03d}"


def grid_key(i, family):
    return f"{surrogate_name(i)}_{family}"


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------


def load_experiment_data(cfg):
    """Load the configured dataset and split it; returns ``(train, test)``."""
    spec = cfg.dataset
    if spec.format == "digits":
        ds = load_digits_dataset()
    elif spec.format == "blobs":
        b = spec.blobs
        ds = make_blobs(b.class_count, b.feature_dim, b.samples_per_class, b.spread,
                        RngStream(cfg.root_seed, (Purpose.DATA,)))
    else:
        ds = load_dataset(spec.path, spec.format, header=spec.header, labels_path=spec.labels_path)
    train_ds, test_ds = split_dataset(ds, spec.train_fraction, RngStream(cfg.root_seed, (Purpose.SPLIT,)))
    if spec.max_train and len(train_ds) > spec.max_train:
        train_ds = train_ds.subset(np.arange(spec.max_train))
    return train_ds, test_ds


def _train_one(name, ds, spec, root_seed, key):
    try:
        return train(ds, spec, RngStream(root_seed, key))
    except DivergenceError as exc:
        raise DivergenceError(f"{name}: {exc}") from None


def train_ensemble(cfg, train_ds, jobs=1):
    """Train every surrogate and every target family member.

    Surrogate ``i`` uses stream key ``(SURROGATE, i)``; member ``j`` of target
    family ``f`` uses ``(TARGET, f, j)``. Models differ only in that key.

    :returns: ``(surrogates, {family_name: [models]})``
    """
    tasks = [(surrogate_name(i), train_ds, spec, cfg.root_seed, (Purpose.SURROGATE, i))
             for i, spec in enumerate(cfg.surrogates)]
    for f, fam in enumerate(cfg.targets):
        tasks += [(target_name(fam.name, j), train_ds, fam.training, cfg.root_seed, (Purpose.TARGET, f, j))
                  for j in range(fam.count)]
    models = _pmap(_train_one, tasks, jobs)
    surrogates = models[:len(cfg.surrogates)]
    targets, k = {}, len(cfg.surrogates)
    for fam in cfg.targets:
        targets[fam.name] = models[k:k + fam.count]
        k += fam.count
    return surrogates, targets


def _accuracy(model, ds):
    return float(np.mean(model.predict_label(ds.features) == ds.labels))


def load_models(cfg, out):
    mdir = Path(out) / "models"
    surrogates = [load_model(mdir / f"{surrogate_name(i)}.model") for i in range(len(cfg.surrogates))]
    targets = {
        fam.name: [load_model(mdir / f"{target_name(fam.name, j)}.model") for j in range(fam.count)]
        for fam in cfg.targets
    }
    return surrogates, targets


# ---------------------------------------------------------------------------
# sources and perturbations
# ---------------------------------------------------------------------------


def select_sources(test_ds, surrogates, P, rng):
    """Uniform draw without replacement among test points every surrogate classifies correctly.

    :returns: ``(test_indices, samples)``
    """
    if not isinstance(surrogates, (list, tuple)):
        surrogates = [surrogates]
    ok = np.ones(len(test_ds), dtype=bool)
    for s in surrogates:
        ok &= s.predict_label(test_ds.features) == test_ds.labels
    eligible = np.flatnonzero(ok)
    if eligible.size < P:
        raise InsufficientSources(f"only {eligible.size} correctly classified test points, need {P}")
    chosen = eligible[rng.gen.permutation(eligible.size)[:P]]
    return chosen, [test_ds[int(i)] for i in chosen]


def _attack_one(surrogate, source, attack_cfg, candidates, root_seed, p, d, keep_trace):
    rng = RngStream(root_seed, (Purpose.ATTACK, p, d))
    try:
        record, trace = run_attack(surrogate, source, attack_cfg, candidates, rng,
                                   source_index=p, perturbation_index=d)
    except AttackError as exc:
        return None, {"p": p, "d": d, "reason": f"{type(exc).__name__}: {exc}"}, None
    return record, None, (trace if keep_trace else None)


def generate_perturbation_set(surrogate, sources, attack_cfg, candidates, root_seed, D,
                              jobs=1, trace_path=None):
    """Attack every source ``D`` times; cell ``(p, d)`` always uses stream ``(ATTACK, p, d)``.

    Reusing the same root seed against a second surrogate therefore reuses the
    same target-class draw and seeds for every matching pair.

    :returns: ``(records, failures)``
    """
    tasks = [(surrogate, src, attack_cfg, candidates, root_seed, p, d, trace_path is not None)
             for p, src in enumerate(sources) for d in range(D)]
    results = _pmap(_attack_one, tasks, jobs)
    records = [r for r, _, _ in results if r is not None]
    failures = [f for _, f, _ in results if f is not None]
    for f in failures:
        log.warning("attack (p=%d, d=%d) failed: %s", f["p"], f["d"], f["reason"])
    if trace_path is not None:
        with open(trace_path, "w") as fh:
            for r, _, tr in results:
                if tr is not None:
                    tr.write_jsonl(fh, p=r.source_index, d=r.perturbation_index)
    total = len(tasks)
    if total and len(failures) > total / 2:
        raise AttackQualityError(f"{len(failures)} of {total} attacks failed")
    return records, failures


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


def evaluate_grid(records, sources, surrogate, targets, shape=None, surrogate_id="s0", target_id="targets"):
    """Fill both indicator tensors for every record against every target.

    :param sources: P x n matrix of source feature vectors, indexed by ``record.source_index``.
    :param shape: ``(P, D)``; inferred from the records when omitted.
    """
    sources = np.asarray(sources, dtype=np.float64)
    N = len(targets)
    if shape is None:
        P = max((r.source_index for r in records), default=-1) + 1
        D = max((r.perturbation_index for r in records), default=-1) + 1
    else:
        P, D = shape
    T_T = np.zeros((P, D, N), dtype=np.uint8)
    T_N = np.zeros((P, D, N), dtype=np.uint8)
    present = np.zeros((P, D), dtype=bool)
    if not records:
        return metrics.TransferGrid(T_T, T_N, present, surrogate_id, target_id)
    if sources.ndim != 2 or sources.shape[1] != surrogate.feature_dim:
        raise DimensionError("sources do not match the surrogate's feature dimension")
    p_idx = np.array([r.source_index for r in records])
    d_idx = np.array([r.perturbation_index for r in records])
    X_adv = np.stack([r.x_prime for r in records])
    if X_adv.shape[1] != sources.shape[1]:
        raise DimensionError("record and source dimensions differ")
    fS_x = surrogate.predict_label(sources)[p_idx]
    fS_xp = surrogate.predict_label(X_adv)
    for j, target in enumerate(targets):
        fT_x = target.predict_label(sources)[p_idx]
        fT_xp = target.predict_label(X_adv)
        T_T[p_idx, d_idx, j] = metrics.targeted_indicator(fT_x, fT_xp, fS_xp)
        T_N[p_idx, d_idx, j] = metrics.nontargeted_indicator(fT_x, fT_xp, fS_x, fS_xp)
    present[p_idx, d_idx] = True
    return metrics.TransferGrid(T_T, T_N, present, surrogate_id, target_id)


def write_grids(out, grids):
    """Long-format CSVs ``grids/<variant>.csv``: one row per present (p, d, j) cell."""
    gdir = Path(out) / "grids"
    gdir.mkdir(parents=True, exist_ok=True)
    for variant in VARIANTS:
        with open(gdir / f"{variant}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["surrogate", "targets", "p", "d", "j", "indicator"])
            for g in grids:
                T = g.tensor(variant)
                for p, d in zip(*np.nonzero(g.present)):
                    for j in range(T.shape[2]):
                        w.writerow([g.surrogate_id, g.target_id, p, d, j, int(T[p, d, j])])


def read_grids(out, shapes):
    """Inverse of :func:`write_grids`; ``shapes`` maps ``(surrogate_id, target_id)`` to ``(P, D, N)``."""
    tensors = {key: {v: np.zeros(shape, dtype=np.uint8) for v in VARIANTS} for key, shape in shapes.items()}
    present = {key: np.zeros(shape[:2], dtype=bool) for key, shape in shapes.items()}
    for variant in VARIANTS:
        with open(Path(out) / "grids" / f"{variant}.csv", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for s, t, p, d, j, val in reader:
                key = (s, t)
                p, d, j = int(p), int(d), int(j)
                tensors[key][variant][p, d, j] = int(val)
                present[key][p, d] = True
    return {
        key: metrics.TransferGrid(tensors[key]["targeted"], tensors[key]["nontargeted"],
                                  present[key], key[0], key[1])
        for key in shapes
    }


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, phases, error=None):
    out = Path(out)
    files = {}
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        files[path.relative_to(out).as_posix()] = {"sha256": _sha256(path), "bytes": path.stat().st_size}
    manifest = {
        "format": MANIFEST_FORMAT,
        "phases": list(phases),
        "complete": error is None and all(p in phases for p in PHASES),
        "error": error,
        "files": files,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _read_phases(out):
    path = Path(out) / "manifest.json"
    if not path.exists():
        return []
    return json.loads(path.read_text()).get("phases", [])


def verify_manifest(out):
    """List problems: missing, altered, or unlisted files. Empty means the run directory is intact."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    problems = []
    for rel, info in manifest["files"].items():
        path = out / rel
        if not path.exists():
            problems.append(f"missing: {rel}")
        elif _sha256(path) != info["sha256"]:
            problems.append(f"hash mismatch: {rel}")
    listed = set(manifest["files"])
    for path in out.rglob("*"):
        rel = path.relative_to(out).as_posix()
        if path.is_file() and rel != "manifest.json" and rel not in listed:
            problems.append(f"unlisted: {rel}")
    return problems


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


def phase_train(cfg, out, jobs=1):
    out = Path(out)
    train_ds, test_ds = load_experiment_data(cfg)
    t0 = time.perf_counter()
    surrogates, targets = train_ensemble(cfg, train_ds, jobs)
    log.info("trained %d models in %.1fs", len(surrogates) + sum(map(len, targets.values())),
             time.perf_counter() - t0)
    mdir = out / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    index = {"dataset": {"train": len(train_ds), "test": len(test_ds),
                         "feature_dim": train_ds.feature_dim, "class_count": train_ds.class_count},
             "models": {}}
    for i, s in enumerate(surrogates):
        save_model(s, mdir / f"{surrogate_name(i)}.model")
        index["models"][surrogate_name(i)] = {"kind": s.kind, "test_accuracy": _accuracy(s, test_ds)}
    for fam, models in targets.items():
        for j, m in enumerate(models):
            save_model(m, mdir / f"{target_name(fam, j)}.model")
            index["models"][target_name(fam, j)] = {"kind": m.kind, "test_accuracy": _accuracy(m, test_ds)}
    _write_json(mdir / "index.json", index)
    return surrogates, targets


def phase_attack(cfg, out, jobs=1, trace=False):
    out = Path(out)
    train_ds, test_ds = load_experiment_data(cfg)
    surrogates, _ = load_models(cfg, out)
    test_idx, sources = select_sources(test_ds, surrogates, cfg.source_count,
                                       RngStream(cfg.root_seed, (Purpose.SOURCES,)))
    src_matrix = np.stack([s.features for s in sources])
    for i, surrogate in enumerate(surrogates):
        pdir = out / "perturbations" / surrogate_name(i)
        pdir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        records, failures = generate_perturbation_set(
            surrogate, sources, cfg.attack, train_ds, cfg.root_seed, cfg.perturbations_per_source,
            jobs=jobs, trace_path=(pdir / "traces.jsonl") if trace else None,
        )
        log.info("%s: %d records, %d failures in %.1fs", surrogate_name(i), len(records),
                 len(failures), time.perf_counter() - t0)
        problems = validate_records(records, src_matrix)
        if problems:
            raise AttackQualityError(f"{len(problems)} invalid records, first: {problems[0]}")
        save_perturbations(
            pdir, records, src_matrix, failures=failures,
            extra={"test_indices": [int(k) for k in test_idx],
                   "source_labels": [s.label for s in sources],
                   "perturbations_per_source": cfg.perturbations_per_source},
        )


def phase_evaluate(cfg, out, jobs=1):
    out = Path(out)
    surrogates, targets = load_models(cfg, out)
    grids = []
    for i, surrogate in enumerate(surrogates):
        records, sources, _ = load_perturbations(out / "perturbations" / surrogate_name(i))
        for fam in cfg.targets:
            grids.append(evaluate_grid(records, sources, surrogate, targets[fam.name],
                                       shape=(cfg.source_count, cfg.perturbations_per_source),
                                       surrogate_id=surrogate_name(i), target_id=fam.name))
    write_grids(out, grids)
    return grids


def _grid_shapes(cfg):
    P, D = cfg.source_count, cfg.perturbations_per_source
    return {(surrogate_name(i), fam.name): (P, D, fam.count)
            for i in range(len(cfg.surrogates)) for fam in cfg.targets}


def _attack_summary(meta, records, epsilon, P, D):
    norms = np.array([r.l2_norm for r in records])
    queries = np.array([r.queries for r in records])
    summary = {
        "attempted": P * D,
        "records": len(records),
        "failures": len(meta["failures"]),
        "within_epsilon": int(np.sum(norms <= epsilon)) if norms.size else 0,
    }
    if norms.size:
        summary.update({
            "l2_mean": float(norms.mean()),
            "l2_median": float(np.median(norms)),
            "l2_max": float(norms.max()),
            "queries_mean": float(queries.mean()),
        })
    return summary


def _epsilon_subgrid(grid, records, epsilon):
    keep = np.zeros_like(grid.present)
    for r in records:
        if r.l2_norm <= epsilon:
            keep[r.source_index, r.perturbation_index] = True
    return metrics.TransferGrid(grid.targeted, grid.nontargeted, grid.present & keep,
                                grid.surrogate_id, grid.target_id)


def _grid_metrics(grid):
    if not grid.present.any():
        return None
    rep = metrics.MetricsReport.from_grid(grid)
    rep.extra["implication_holds"] = grid.implication_holds()
    return rep


def _display_rows(cfg, matrix):
    if cfg.display_sources:
        return matrix[: cfg.display_sources]
    return matrix


def phase_report(cfg, out):
    """Aggregate grids into ``report.json``, expectation CSVs and figures."""
    out = Path(out)
    index = json.loads((out / "models" / "index.json").read_text())
    grids = read_grids(out, _grid_shapes(cfg))
    perturbations = {}
    for i in range(len(cfg.surrogates)):
        records, _, meta = load_perturbations(out / "perturbations" / surrogate_name(i))
        perturbations[surrogate_name(i)] = (records, meta)

    edir, fdir = out / "expectations", out / "figures"
    edir.mkdir(exist_ok=True)
    fdir.mkdir(exist_ok=True)

    config_echo = cfg.to_dict()
    config_echo.pop("output_dir")
    report = {"config": config_echo, "dataset": index["dataset"], "models": {}, "attack": {}, "grids": {}}

    for fam in cfg.targets:
        accs = [index["models"][target_name(fam.name, j)]["test_accuracy"] for j in range(fam.count)]
        report["models"][fam.name] = {"count": fam.count, "kind": fam.training.kind,
                                      "test_accuracy_mean": float(np.mean(accs)),
                                      "test_accuracy_min": float(np.min(accs)),
                                      "test_accuracy_max": float(np.max(accs))}
    for i in range(len(cfg.surrogates)):
        sname = surrogate_name(i)
        report["models"][sname] = index["models"][sname]
        records, meta = perturbations[sname]
        report["attack"][sname] = _attack_summary(meta, records, cfg.epsilon, cfg.source_count,
                                                  cfg.perturbations_per_source)

    for (sname, fname), grid in grids.items():
        key = f"{sname}_{fname}"
        rep = _grid_metrics(grid)
        if rep is None:
            report["grids"][key] = None
            continue
        entry = rep.to_dict()
        eps_rep = _grid_metrics(_epsilon_subgrid(grid, perturbations[sname][0], cfg.epsilon))
        entry["within_epsilon"] = None if eps_rep is None else {
            "record_count": eps_rep.record_count,
            "mean_expectation": eps_rep.mean_expectation,
            "mean_per_source_std": eps_rep.mean_per_source_std,
            "overall_std": eps_rep.overall_std,
        }
        report["grids"][key] = entry
        for variant in VARIANTS:
            E = grid.expectation(variant)
            figures.write_matrix_csv(edir / f"{key}_{variant}.csv", E, row_label="source")
            figures.emit_heatmap(_display_rows(cfg, E), fdir / f"{key}_{variant}",
                                 title=f"{variant} transferability expectation, {sname} to {fname}")
            figures.emit_boxplot_data(E, fdir / f"{key}_{variant}_boxplot.csv")

    if len(cfg.surrogates) == 2:
        report["agreement"] = {}
        for fam in cfg.targets:
            ga, gb = grids[("s0", fam.name)], grids[("s1", fam.name)]
            entry = {}
            for variant in VARIANTS:
                try:
                    overall, nonzero = metrics.surrogate_agreement(ga, gb, variant)
                except InvalidArguments as exc:
                    entry[variant] = {"error": str(exc)}
                    continue
                entry[variant] = {"overall": overall, "nonzero": None if np.isnan(nonzero) else nonzero}
            report["agreement"][fam.name] = entry

    if len(cfg.targets) >= 2:
        report["cross_family"] = {}
        fa, fb = cfg.targets[0].name, cfg.targets[1].name
        for i in range(len(cfg.surrogates)):
            sname = surrogate_name(i)
            ga, gb = grids[(sname, fa)], grids[(sname, fb)]
            both = ga.present & gb.present
            entry = {"families": [fa, fb]}
            for variant in VARIANTS:
                a = ga.expectation(variant)[both]
                b = gb.expectation(variant)[both]
                try:
                    r = metrics.pearson(a, b)
                except (metrics.ZeroVarianceError, InvalidArguments) as exc:
                    r = None
                    entry[f"{variant}_pearson_error"] = str(exc)
                counts = metrics.histogram2d(a, b, cfg.histogram_bins)
                figures.emit_count_heatmap(counts, fdir / f"{sname}_{fa}_vs_{fb}_{variant}_hist",
                                           title=f"{fa} (rows) vs {fb} (columns), {variant}")
                entry[variant] = {"pearson": r, "histogram": counts.tolist(),
                                  f"mean_{fa}": float(a.mean()) if a.size else None,
                                  f"mean_{fb}": float(b.mean()) if b.size else None}
            report["cross_family"][sname] = entry

    _write_json(out / "report.json", report)
    return report


def run_phases(cfg, phases, jobs=1, trace=False):
    """Run the named phases in order, keeping ``manifest.json`` current after each."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = [p for p in _read_phases(out) if p not in phases]
    result = None
    for phase in PHASES:
        if phase not in phases:
            continue
        try:
            if phase == "train":
                phase_train(cfg, out, jobs)
            elif phase == "attack":
                phase_attack(cfg, out, jobs, trace)
            elif phase == "evaluate":
                phase_evaluate(cfg, out, jobs)
            else:
                result = phase_report(cfg, out)
        except Exception as exc:
            write_manifest(out, done, error=f"{phase}: {type(exc).__name__}: {exc}")
            raise
        done.append(phase)
        write_manifest(out, [p for p in PHASES if p in done])
    return result


def run_experiment(cfg, jobs=1, trace=False):
    """train, attack, evaluate, report. Returns the report dictionary."""
    return run_phases(cfg, PHASES, jobs=jobs, trace=trace)


def spot_check(cfg, out, cells=100, seed=0):
    """Re-derive random grid cells from stored models and stored x' vectors.

    :returns: list of mismatching ``(surrogate, family, p, d, j)`` cells.
    """
    out = Path(out)
    surrogates, targets = load_models(cfg, out)
    grids = read_grids(out, _grid_shapes(cfg))
    gen = np.random.default_rng(seed)
    bad = []
    cache = {}
    keys = sorted(grids)
    for _ in range(cells):
        sname, fname = keys[gen.integers(len(keys))]
        grid = grids[(sname, fname)]
        pd = np.argwhere(grid.present)
        if pd.size == 0:
            continue
        p, d = pd[gen.integers(len(pd))]
        j = int(gen.integers(grid.dims[2]))
        if sname not in cache:
            recs, srcs, _ = load_perturbations(out / "perturbations" / sname)
            cache[sname] = ({(r.source_index, r.perturbation_index): r for r in recs}, srcs)
        recs, srcs = cache[sname]
        rec = recs[(int(p), int(d))]
        s = surrogates[int(sname[1:])]
        t = targets[fname][j]
        x, xp = srcs[p], rec.x_prime
        tt = metrics.targeted_indicator(t.predict_label(x), t.predict_label(xp), s.predict_label(xp))
        tn = metrics.nontargeted_indicator(t.predict_label(x), t.predict_label(xp),
                                           s.predict_label(x), s.predict_label(xp))
        if tt != grid.targeted[p, d, j] or tn != grid.nontargeted[p, d, j]:
            bad.append((sname, fname, int(p), int(d), j))
    return bad
