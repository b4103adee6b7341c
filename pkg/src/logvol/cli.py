"""Batch command line: one subcommand per pipeline phase.

Every phase reads earlier artifacts from the output directory and writes its
own into ``<out>/<phase>/`` together with the ``run_manifest.json`` it ran
under. Wall-clock timestamps live only in ``<out>/metadata.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import benchmark_models as bm
from . import factor_pipeline as fp
from . import rolling_stability as rs
from . import stats_core as sc
from .dbht import (build_planar_graph, load_clustering, save_clustering, save_edges,
                   similarity_from_residual)
from .memory_metrics import panel_profiles
from .panel_io import PanelError, clean_panel, load_panel, load_prices, save_panel
from .regression import DEFAULT_A_GRID, LAMBDA_RATIO, N_LAMBDA
from .synth import SynthSpec, write_synthetic

ENV_PREFIX = "LOGVOL_"
PHASES = ("synth", "clean", "transform", "decompose", "memory", "filtrate", "enrich",
          "compare", "rolling", "report")


class DependencyError(RuntimeError):
    def __init__(self, phase, required, path):
        super().__init__(f"'{phase}' needs the output of '{required}' ({path}); "
                         f"run '{required}' first")
        self.required = required


@dataclasses.dataclass
class RunManifest:
    input: str | None = None
    sectors: str | None = None
    out: str = "out"
    scheme: str = "eigen"
    p: float = 0.90
    a_grid: list = dataclasses.field(default_factory=lambda: list(DEFAULT_A_GRID))
    n_lambda: int = N_LAMBDA
    lambda_ratio: float = LAMBDA_RATIO
    folds: int = 10
    n_perm: int = 99
    level: float = 0.05
    alpha: float = 0.05
    bonferroni_divisor: float | None = None
    n_factors: int | None = None
    rolling_window: int = 1600
    rolling_count: int = 50
    seed: int = 0
    workers: int = 1
    # how group contribution fractions are aggregated (recorded for provenance)
    fraction_aggregation: str = "median of per-stock fractions, renormalized"
    synth: dict = dataclasses.field(default_factory=lambda: {
        "n_stocks": 60, "n_days": 3000, "cluster_sizes": [10, 10, 10, 10, 10, 10],
        "market_memory": 0.5, "cluster_memory": [0.9, 0.9, 0.0, 0.0, 0.0, 0.0],
        "noise": 1.5, "n_sectors": 6})

    def validate(self):
        if self.scheme not in ("eigen", "equal"):
            raise ValueError(f"scheme must be 'eigen' or 'equal', not {self.scheme!r}")
        if not 0 < self.p <= 1:
            raise ValueError("p must be in (0, 1]")
        if self.folds < 2 or self.n_lambda < 1 or not self.a_grid:
            raise ValueError("bad elastic-net grid settings")
        if self.n_perm and self.n_perm < 99:
            raise ValueError("n_perm must be 0 (off) or >= 99")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_json(self) -> str:
        # the output location is not a parameter of the results
        d = dataclasses.asdict(self)
        d.pop("out")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_manifest(path=None, env=None, **overrides) -> RunManifest:
    """Defaults, then the JSON manifest, then ``LOGVOL_*`` variables, then flags."""
    data = {}
    if path is not None:
        data.update(json.loads(Path(path).read_text()))
    env = os.environ if env is None else env
    names = {f.name for f in dataclasses.fields(RunManifest)}
    for key, raw in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in names:
                data[name] = _coerce(raw)
    data.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    m = RunManifest(**data)
    m.validate()
    return m


# -- small io helpers ---------------------------------------------------------

def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "" if not np.isfinite(x) else repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    return x


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


class Workspace:
    def __init__(self, manifest: RunManifest):
        self.m = manifest
        self.root = Path(manifest.out)

    def phase_dir(self, phase) -> Path:
        d = self.root / phase
        d.mkdir(parents=True, exist_ok=True)
        (d / "run_manifest.json").write_text(self.m.to_json())
        return d

    def need(self, phase, required, name) -> Path:
        path = self.root / required / name
        if not path.exists():
            raise DependencyError(phase, required, path)
        return path

    def load_logvol(self, phase) -> fp.LogVolPanel:
        d = self.need(phase, "transform", "omega.npy").parent
        tickers = json.loads((d / "tickers.json").read_text())
        return fp.LogVolPanel(tickers, np.load(d / "omega.npy"), np.load(d / "floor_count.npy"))

    def load_decomposition(self, phase):
        d = self.need(phase, "decompose", "epsilon.npy").parent
        _, clustering = load_clustering(d / "clustering.csv")
        return d, clustering


# -- phases -------------------------------------------------------------------

def cmd_synth(ws: Workspace):
    d = ws.phase_dir("synth")
    cfg = dict(ws.m.synth)
    cfg["seed"] = ws.m.seed
    spec = SynthSpec(**cfg)
    write_synthetic(spec, d)
    return {"stocks": spec.n_stocks, "days": spec.n_days}


def cmd_clean(ws: Workspace):
    src = Path(ws.m.input) if ws.m.input else ws.need("clean", "synth", "prices.csv")
    panel = clean_panel(load_prices(src), ws.m.p)
    d = ws.phase_dir("clean")
    save_panel(panel, d / "panel.csv", ws.m.p)
    return {"stocks": len(panel.tickers), "dates": int(panel.dates.size),
            "dropped": panel.dropped}


def cmd_transform(ws: Workspace):
    panel = load_panel(ws.need("transform", "clean", "panel.csv"))
    lv = fp.log_abs_transform(fp.log_returns(panel), panel.tickers)
    d = ws.phase_dir("transform")
    np.save(d / "omega.npy", lv.omega)
    np.save(d / "floor_count.npy", lv.floor_count)
    _dump(lv.tickers, d / "tickers.json")
    E = sc.correlation(lv.omega, lv.tickers)
    sc.save_correlation(E, d / "E.csv")
    return {"stocks": len(lv.tickers), "T": int(lv.omega.shape[1]),
            "floored": int(lv.floor_count.sum())}


def cmd_decompose(ws: Workspace):
    lv = ws.load_logvol("decompose")
    m = ws.m
    dec = fp.decompose(lv, m.scheme, None, a_grid=m.a_grid, folds=m.folds,
                       n_perm=m.n_perm or None, workers=m.workers, n_lambda=m.n_lambda,
                       lambda_ratio=m.lambda_ratio)
    d = ws.phase_dir("decompose")
    np.save(d / "market_mode.npy", dec.market.values)
    np.save(d / "residuals.npy", dec.removal.residuals)
    np.save(d / "cluster_removed.npy", dec.cluster_removed)
    np.save(d / "epsilon.npy", dec.epsilon)
    np.save(d / "cluster_modes.npy", np.vstack([md.values for md in dec.modes]))
    save_clustering(dec.clustering, lv.tickers, d / "clustering.csv")
    sc.save_correlation(dec.G, d / "G.csv", order=np.argsort(dec.clustering.labels, kind="stable"))
    save_edges(build_planar_graph(similarity_from_residual(dec.G)[0]), lv.tickers, d / "edges.csv")
    records = []
    for i, t in enumerate(lv.tickers):
        ols = dec.removal.fits[i]
        rec = {"stock": t, "market": {"beta": ols.beta, "alpha": ols.alpha,
                                      "p_beta": ols.p_beta, "p_alpha": ols.p_alpha},
               "elastic_net": dec.fits[i].to_record(t)}
        records.append(rec)
    _dump({"scheme": m.scheme, "market_weights": dec.market.weights.weights.tolist(),
           "K": dec.clustering.K, "sizes": dec.clustering.sizes().tolist(),
           "stocks": records}, d / "fits.json")
    return {"K": dec.clustering.K}


def cmd_memory(ws: Workspace):
    lv = ws.load_logvol("memory")
    profiles = panel_profiles(lv.omega, lv.tickers, level=ws.m.level)
    d = ws.phase_dir("memory")
    _dump([p.to_record() for p in profiles], d / "profiles.json")
    L = max(p.acf.size for p in profiles)
    _write_csv(d / "acf.csv", ["ticker", "lag", "acf"],
               [(p.ticker, j + 1, v) for p in profiles for j, v in enumerate(p.acf)])
    _write_csv(d / "eta_curve.csv", ["ticker", "lag", "eta"],
               [(p.ticker, j + 1, v) for p in profiles for j, v in enumerate(p.eta_curve)])
    med, mad = sc.median_mad([p.eta for p in profiles])
    return {"median_eta": med, "mad_eta": mad, "max_lag": L}


def _filtration(ws, phase):
    d, clustering = ws.load_decomposition(phase)
    lv = ws.load_logvol(phase)
    stages = [lv.omega, np.load(d / "residuals.npy"), np.load(d / "cluster_removed.npy"),
              np.load(d / "epsilon.npy")]
    return lv, clustering, fp.memory_filtration(stages, clustering.labels, lv.tickers,
                                                ws.m.level, ws.m.workers)


def _group_record(g: fp.GroupStats) -> dict:
    return {"group": g.name, "size": int(g.members.size),
            "median": [_finite(x) for x in g.median], "mad": [_finite(x) for x in g.mad],
            "significant": [bool(x) for x in g.significant],
            "n_used": [int(x) for x in g.n_used],
            "fractions": dict(zip(fp.FRACTIONS, [_finite(x) for x in g.fractions]))}


def cmd_filtrate(ws: Workspace):
    _, _, rep = _filtration(ws, "filtrate")
    d = ws.phase_dir("filtrate")
    selected = fp.select_cluster_factors(rep)
    _dump({"stages": list(fp.STAGES), "ratios": list(fp.RATIOS),
           "groups": [_group_record(g) for g in rep.groups.values()],
           "selected_clusters": selected, "stocks": rep.stock_records()}, d / "filtration.json")
    return {"selected": selected}


def _load_sectors(ws, phase, tickers):
    path = Path(ws.m.sectors) if ws.m.sectors else ws.root / "synth" / "sectors.csv"
    if not path.exists():
        raise DependencyError(phase, "synth", path)
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["ticker"]] = row["sector"]
    missing = [t for t in tickers if t not in table]
    if missing:
        raise ValueError(f"no sector for {', '.join(missing[:5])}")
    return [table[t] for t in tickers]


def cmd_enrich(ws: Workspace):
    d_dec, clustering = ws.load_decomposition("enrich")
    tickers, _ = load_clustering(d_dec / "clustering.csv")
    sectors = _load_sectors(ws, "enrich", tickers)
    res = fp.sector_enrichment(clustering, sectors, ws.m.alpha, ws.m.bonferroni_divisor)
    n_sec = len(set(sectors))
    divisor = ws.m.bonferroni_divisor or fp.default_bonferroni(clustering.K, n_sec)
    d = ws.phase_dir("enrich")
    _dump({"alpha": ws.m.alpha, "bonferroni_divisor": divisor,
           "threshold": ws.m.alpha / divisor, "clusters": [r.to_record() for r in res]},
          d / "enrichment.json")
    return {"significant": sum(r.significant for r in res)}


def cmd_compare(ws: Workspace):
    ws.need("compare", "filtrate", "filtration.json")
    lv, _, rep = _filtration(ws, "compare")
    F = ws.m.n_factors or len(fp.select_cluster_factors(rep)) + 1
    base = rep.eta[:, 0]
    ours = bm.cdf_from_fractions(fp.residual_fraction(rep), "cluster_model")
    pca_res, _ = bm.pca_residual_panel(lv.omega, F)
    pca = bm.residual_memory_cdf(pca_res, base, "pca", ws.m.level)
    fa_fit, fa_res = bm.fa_fit_varimax(lv.omega, F)
    fa = bm.residual_memory_cdf(fa_res, base, "factor_analysis", ws.m.level)
    d = ws.phase_dir("compare")
    _write_csv(d / "cdf.csv", ["fraction", "cumulative_share", "model_name"],
               [r for c in (ours, pca, fa) for r in c.rows()])
    summary = {"n_factors": F, "heywood": fa_fit.heywood,
               "pca_residual_variance": float((pca_res ** 2).sum()),
               "fa_residual_variance": float((fa_res ** 2).sum()),
               "quantile_90": {c.model: c.quantile(0.9) for c in (ours, pca, fa)}}
    _dump(summary, d / "compare.json")
    return summary["quantile_90"]


def cmd_rolling(ws: Workspace):
    lv = ws.load_logvol("rolling")
    _, static = ws.load_decomposition("rolling")
    plan = rs.make_windows(lv.omega.shape[1], ws.m.rolling_window, ws.m.rolling_count)
    records, results = rs.rolling_pipeline(lv, plan, static, ws.m.scheme, ws.m.alpha,
                                           ws.m.level, ws.m.workers)
    d = ws.phase_dir("rolling")
    _write_csv(d / "rolling.csv", ["cluster_id", "windows_matched", "windows_memory_significant"],
               [(r.cluster, r.windows_matched, r.windows_memory_significant) for r in records])
    _dump({"n_windows": plan.n_windows, "length": plan.length, "shift": plan.shift,
           "windows": [{"start": w.start, "end": w.end, "K": w.clustering.K,
                        "matched": {str(k): {"window_cluster": int(v[0]), "p": v[1]}
                                    for k, v in w.matches.items()},
                        "memory_significant": {str(k): v for k, v in w.memory_significant.items()}}
                       for w in results]}, d / "rolling.json")
    return {"shift": plan.shift}


def cmd_report(ws: Workspace):
    filt = json.loads(ws.need("report", "filtrate", "filtration.json").read_text())
    enrich_path = ws.root / "enrich" / "enrichment.json"
    enrich = ({r["cluster"]: r for r in json.loads(enrich_path.read_text())["clusters"]}
              if enrich_path.exists() else {})
    rows = []
    for g in filt["groups"]:
        if g["group"] == "market":
            continue
        k = g["group"]
        e = enrich.get(k, {})
        fr = g["fractions"]
        rows.append((k, g["size"], e.get("dominant_sector", ""), e.get("p", float("nan")),
                     g["significant"][1], fr["market"], fr["cluster"], fr["interac"], fr["resid"]))
    market = next(g for g in filt["groups"] if g["group"] == "market")
    fr = market["fractions"]
    rows.append(("all", market["size"], "", float("nan"), market["significant"][1],
                 fr["market"], fr["cluster"], fr["interac"], fr["resid"]))
    d = ws.phase_dir("report")
    _write_csv(d / "table2.csv", ["k", "size", "dominant_sector", "p", "cluster_sig",
                                  "market", "cluster", "interac", "resid"],
               [tuple(float("nan") if v is None else v for v in r) for r in rows])
    lv, _, rep = _filtration(ws, "report")
    scatter = fp.memory_scatter(lv, rep)
    _write_csv(d / "scatter.csv", ["ticker", "rho_vol", "eta", "beta_vol", "l_cut"],
               [(p["ticker"], p["rho_vol"], p["eta"],
                 float("nan") if p["beta_vol"] is None else p["beta_vol"], p["l_cut"])
                for p in scatter["points"]])
    _dump(scatter["tests"], d / "spearman.json")
    return {"clusters": len(rows) - 1}


COMMANDS = {"synth": cmd_synth, "clean": cmd_clean, "transform": cmd_transform,
            "decompose": cmd_decompose, "memory": cmd_memory, "filtrate": cmd_filtrate,
            "enrich": cmd_enrich, "compare": cmd_compare, "rolling": cmd_rolling,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="logvol", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=PHASES)
    ap.add_argument("--manifest", help="JSON run manifest")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, help="worker threads")
    ap.add_argument("--seed", type=int, help="random seed (synthetic data)")
    return ap


def _touch_metadata(root: Path, command: str):
    path = root / "metadata.json"
    meta = json.loads(path.read_text()) if path.exists() else {}
    meta[command] = dt.datetime.now(dt.timezone.utc).isoformat()
    _dump(meta, path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.manifest, out=args.out, workers=args.workers,
                                 seed=args.seed)
        ws = Workspace(manifest)
        ws.root.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](ws)
        _touch_metadata(ws.root, args.command)
    except DependencyError as exc:
        _error(args.command, exc, required=exc.required)
        return 3
    except (PanelError, ValueError, FileNotFoundError) as exc:
        _error(args.command, exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything as a record
        _error(args.command, exc, trace=traceback.format_exc())
        return 1
    print(json.dumps({"command": args.command, "status": "ok", "summary": summary},
                     sort_keys=True, default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


def _error(command, exc, **extra):
    rec = {"command": command, "status": "error", "error": type(exc).__name__,
           "message": str(exc)}
    rec.update(extra)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
