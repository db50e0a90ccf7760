"""End-to-end runs: fits over a range of G, simulation replicates and their output files.

Every random stream is derived from ``(seed, G, replicate)`` so that results do
not depend on how tasks are scheduled across worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .em import EMConfig, MixtureFit, fit_mixture
from .errors import DataError, FitFailure, MVPLNError, SpecError
from .initialization import InitSpec, initialize
from .sampler import ChainConfig
from .selection import CRITERIA, SelectionRow, SelectionTable, ari, count_free_params, criteria
from .simgen import format_labels, generate, preset
from .tensor_io import (
    CountTensor,
    LibrarySizes,
    compute_library_sizes,
    format_counts,
    format_library_sizes,
    load_counts,
    load_library_sizes,
)

__all__ = ["RunConfig", "derive_seed", "resolve_library_sizes", "run_fit", "run_sim", "FitOutcome"]


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    preset: str | None = None
    r: int | None = None
    p: int | None = None
    n: int = 1000
    g_min: int = 1
    g_max: int = 3
    init: str = "kmeans"
    init_runs: int = 3
    chains: int = 3
    iters: int = 1000
    increment: int = 100
    max_outer: int = 200
    max_retries: int = 5
    norm: str = "tmm"
    seed: int = 0
    out: str | None = None
    replicates: int = 1
    jobs: int = 1

    def __post_init__(self):
        if not 1 <= self.g_min <= self.g_max:
            raise SpecError("need 1 <= g_min <= g_max")
        if self.jobs < 1 or self.replicates < 1 or self.init_runs < 1:
            raise SpecError("jobs, replicates and init_runs must be >= 1")
        if self.init not in ("kmeans", "random"):
            raise SpecError(f"unknown init method {self.init!r}")
        if not (self.norm in ("tmm", "total", "none") or self.norm.startswith("file:")):
            raise SpecError(f"unknown normalization {self.norm!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        clean = {k.replace("-", "_"): v for k, v in d.items()}
        unknown = set(clean) - names
        if unknown:
            raise SpecError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return cls(**clean)

    def to_dict(self) -> dict:
        return asdict(self)

    def em_config(self) -> EMConfig:
        chain = ChainConfig(n_chains=self.chains, n_iter=self.iters, increment=self.increment)
        return EMConfig(chain=chain, max_outer=self.max_outer, max_retries=self.max_retries)


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit seed determined only by ``seed`` and the integer key."""
    state = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def resolve_library_sizes(tensor: CountTensor, norm: str) -> LibrarySizes:
    if norm == "none":
        return LibrarySizes.ones(tensor.r, tensor.p)
    if norm.startswith("file:"):
        sizes = load_library_sizes(norm[5:])
        sizes.check(tensor.r, tensor.p)
        return sizes
    return compute_library_sizes(tensor, norm)


@dataclass
class FitOutcome:
    G: int
    fit: MixtureFit | None
    error: str | None
    init_info: dict | None = None


def _fit_task(args) -> tuple[int, dict | None, str | None, dict | None]:
    counts, unit_ids, occ, var, s, G, init_spec, em_config, fit_seed = args
    tensor = CountTensor(counts, unit_ids, occ, var)
    sizes = LibrarySizes(s)
    try:
        z, comps, info = initialize(tensor, sizes, G, init_spec)
        fit = fit_mixture(tensor, sizes, G, z, em_config, fit_seed, init_components=comps)
    except (MVPLNError, np.linalg.LinAlgError) as exc:
        return G, None, f"{type(exc).__name__}: {exc}", None
    return G, fit.to_dict(), None, info


def _execute(tasks: list, jobs: int) -> list:
    if jobs == 1 or len(tasks) <= 1:
        return [_fit_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_fit_task, tasks))


def _task(tensor: CountTensor, s: LibrarySizes, G: int, config: RunConfig, replicate: int):
    init_spec = InitSpec(config.init, config.init_runs, derive_seed(config.seed, G, replicate, 0))
    fit_seed = derive_seed(config.seed, G, replicate, 1)
    return (
        np.asarray(tensor.counts), tensor.unit_ids, tensor.occasion_ids, tensor.variable_ids,
        np.asarray(s.s), G, init_spec, config.em_config(), fit_seed,
    )


def _table(tensor: CountTensor, outcomes: list[FitOutcome], reference=None) -> SelectionTable:
    rows = []
    for o in outcomes:
        K = count_free_params(o.G, tensor.r, tensor.p, "mvpln")
        if o.fit is None:
            rows.append(SelectionRow(o.G, K, error=o.error))
            continue
        aic, bic, aic3, icl = criteria(o.fit.final_loglik, K, tensor.n, o.fit.z)
        rows.append(
            SelectionRow(
                o.G, K, o.fit.final_loglik, aic, bic, aic3, icl, o.fit.converged,
                o.fit.n_outer_iterations,
                None if reference is None else ari(reference, o.fit.hard_labels),
            )
        )
    return SelectionTable.build(rows)


def _trace_csv(fit: MixtureFit) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    keys = ["chain_iterations", "pairs_sampled", "failed_first_pass", "failed_final", "max_psrf", "min_ess"]
    writer.writerow(["iteration", "loglik", *keys])
    for t, (ll, h) in enumerate(zip(fit.loglik_trace, fit.diagnostics_history), start=1):
        writer.writerow([t, repr(float(ll)), *(h.get(k, "") for k in keys)])
    return buf.getvalue()


def _write(path: Path, text: str, manifest: dict, root: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    path.write_bytes(data)
    manifest[str(path.relative_to(root))] = hashlib.sha256(data).hexdigest()


def _write_outputs(out: Path, tensor, table: SelectionTable, outcomes, manifest: dict, root: Path):
    _write(out / "selection.csv", table.to_csv(), manifest, root)
    _write(out / "selection.json", table.to_json() + "\n", manifest, root)
    for o in outcomes:
        if o.fit is None:
            _write(out / f"fit_G{o.G}.error.txt", o.error + "\n", manifest, root)
            continue
        doc = o.fit.to_dict()
        doc["initialization"] = o.init_info
        _write(out / f"fit_G{o.G}.json", json.dumps(doc, indent=1) + "\n", manifest, root)
        _write(out / f"labels_G{o.G}.csv", format_labels(o.fit.hard_labels, tensor.unit_ids), manifest, root)
        _write(out / f"trace_G{o.G}.csv", _trace_csv(o.fit), manifest, root)


def _write_manifest(root: Path, config: RunConfig, manifest: dict, extra: dict | None = None) -> None:
    # scheduling and location do not affect results, so they stay out of the manifest
    resolved = {k: v for k, v in config.to_dict().items() if k not in ("jobs", "out")}
    doc = {"config": resolved, "artifacts": dict(sorted(manifest.items()))}
    if extra:
        doc.update(extra)
    (root / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def _fit_range(tensor, s, config: RunConfig, replicate: int) -> list:
    return [_task(tensor, s, G, config, replicate) for G in range(config.g_min, config.g_max + 1)]


def _outcomes(results) -> list[FitOutcome]:
    return [
        FitOutcome(G, None if d is None else MixtureFit.from_dict(d), err, info)
        for G, d, err, info in results
    ]


def load_input(config: RunConfig) -> CountTensor:
    if config.input is None:
        raise DataError("no input file given")
    if config.r is None or config.p is None:
        raise DataError("--r and --p are required with --input")
    return load_counts(config.input, config.r, config.p)


def run_fit(
    config: RunConfig, tensor: CountTensor | None = None, reference=None
) -> tuple[SelectionTable, list[FitOutcome]]:
    """Fit every G in the configured range and write the output directory (if any)."""
    tensor = load_input(config) if tensor is None else tensor
    s = resolve_library_sizes(tensor, config.norm)
    outcomes = _outcomes(_execute(_fit_range(tensor, s, config, 0), config.jobs))
    table = _table(tensor, outcomes, reference)
    if config.out is not None:
        root = Path(config.out)
        root.mkdir(parents=True, exist_ok=True)
        manifest: dict = {}
        _write(root / "library_sizes.csv", format_library_sizes(s), manifest, root)
        _write_outputs(root, tensor, table, outcomes, manifest, root)
        _write_manifest(root, config, manifest, {"chosen": table.chosen})
    if all(o.fit is None for o in outcomes):
        raise FitFailure("every G failed: " + "; ".join(f"G={o.G}: {o.error}" for o in outcomes))
    return table, outcomes


def _summary(tables: list[SelectionTable]) -> dict:
    out = {}
    for c in CRITERIA:
        picks, scores = [], []
        for t in tables:
            g = t.chosen.get(c)
            if g is None:
                continue
            picks.append(g)
            row = next(r for r in t.rows if r.G == g)
            scores.append(row.ari)
        counts = {str(g): picks.count(g) for g in sorted(set(picks))}
        mean = float(np.mean(scores)) if scores else float("nan")
        sd = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
        modal = max(sorted(set(picks)), key=picks.count) if picks else None
        out[c] = {
            "chosen_counts": counts,
            "modal_G": modal,
            "ari_mean": mean,
            "ari_sd": sd,
            "display": "failed" if modal is None else f"{modal} ({mean:.2f}, {sd:.2f})",
        }
    return out


def run_sim(config: RunConfig) -> dict:
    """Generate replicate datasets from a preset, fit each and summarize model choice and ARI."""
    if config.preset is None:
        raise SpecError("simulation needs a preset")
    datasets = []
    tasks = []
    for k in range(config.replicates):
        spec = preset(config.preset, n=config.n, seed=derive_seed(config.seed, 0, k, 2))
        tensor, labels = generate(spec)
        s = resolve_library_sizes(tensor, config.norm)
        datasets.append((spec, tensor, labels, s))
        tasks.extend(_fit_range(tensor, s, config, k))
    results = _outcomes(_execute(tasks, config.jobs))
    per = config.g_max - config.g_min + 1
    tables, replicate_rows = [], []
    root = Path(config.out) if config.out is not None else None
    manifest: dict = {}
    for k, (spec, tensor, labels, s) in enumerate(datasets):
        outcomes = results[k * per : (k + 1) * per]
        table = _table(tensor, outcomes, labels)
        tables.append(table)
        replicate_rows.append({"replicate": k + 1, "chosen": table.chosen})
        if root is not None:
            rep = root / f"replicate_{k + 1}"
            rep.mkdir(parents=True, exist_ok=True)
            _write(rep / "spec.json", spec.to_json() + "\n", manifest, root)
            _write(rep / "counts.csv", format_counts(tensor), manifest, root)
            _write(rep / "true_labels.csv", format_labels(labels, tensor.unit_ids), manifest, root)
            _write_outputs(rep, tensor, table, outcomes, manifest, root)
    summary = {"replicates": replicate_rows, "criteria": _summary(tables)}
    if root is not None:
        _write(root / "summary.json", json.dumps(summary, indent=1) + "\n", manifest, root)
        _write_manifest(root, config, manifest)
    summary["tables"] = tables
    return summary

