"""``pvregime`` command line: simulate, fit, train, forecast and score.

Exit status 0 on success, 2 when an input artifact is missing, 3 when a
parameter or model fails validation.  Logs go to stderr; ``--json`` prints a
run summary on stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import ArModel, fit_baselines, rolling_baselines
from .clearsky import ClearSkyModel, FitError, detect_control_points, fit_sunny, select_sunny_days
from .deconv import DiffuseFilter, check_lambdas, default_lambdas, learn_dictionary
from .detect import ClassificationError, Regime, Thresholds, classify, estimate_alpha
from .distributions import from_spec
from .forecast import ForecastModels, ForecastTable, rolling_evaluate
from .metrics import evaluate_all, write_report
from .regimes import PartlyCloudyHmm, estimate_sigmas, make_hmm, train_segmental_kmeans
from .synth import ConfigError, ScenarioConfig, generate
from .timeseries import IngestError, PowerSeries, daylight_mask, ingest_csv, write_csv

log = logging.getLogger("pvregime")

EXIT_MISSING = 2
EXIT_INVALID = 3


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = str(path)


class ValidationFailure(Exception):
    pass


# ------------------------------------------------------------------ configuration


@dataclass
class PipelineConfig:
    M: int = 5
    ell: int = 1
    horizon: int = 12
    window: int = 4
    lambdas: tuple[float, float, float] | None = None
    outer_iters: int = 20
    mu: float = 3.0
    mu_oc: float = 3.0
    alpha_max: float = 0.9
    gamma: float = 0.1
    rates: tuple[float, float, float] = (2.0, 4.0, 8.0)
    ar_order: int = 4
    sample_period: int = 15
    nameplate: float = 3740.0
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.M < 2:
            raise ValidationFailure(f"M must be >= 2, got {self.M}")
        if not 1 <= self.ell < self.M:
            raise ValidationFailure(f"ell < M violated: ell={self.ell}, M={self.M}")
        if self.horizon < 1 or self.window < 2:
            raise ValidationFailure("horizon must be >= 1 and window >= 2")
        if self.lambdas is not None:
            try:
                check_lambdas(*self.lambdas)
            except ValueError as exc:
                raise ValidationFailure(str(exc)) from None
        lz, lb, le = self.rates
        if not 0 < lz <= lb <= le:
            raise ValidationFailure(f"rates must satisfy 0 < lambda_z <= lambda_b <= lambda_e, got {self.rates}")
        if not (self.mu > 1 and self.mu_oc > 0 and 0 < self.alpha_max <= 1):
            raise ValidationFailure("thresholds need mu > 1, mu_oc > 0, 0 < alpha_max <= 1")
        if not 0 <= self.gamma <= 1:
            raise ValidationFailure("gamma must lie in [0, 1]")
        if self.jobs < 1:
            raise ValidationFailure("jobs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationFailure(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("lambdas", "rates"):
            if kw.get(key) is not None:
                kw[key] = tuple(float(x) for x in kw[key])
        return cls(**kw)


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(p)
    with p.open(encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _ingest(path, cfg: PipelineConfig) -> PowerSeries:
    if not Path(path).is_file():
        raise MissingArtifact(path)
    return ingest_csv(path, cfg.sample_period, cfg.nameplate)


# ------------------------------------------------------------------ pipeline steps


def fit_clearsky(series: PowerSeries, days=None) -> ClearSkyModel:
    """Fit the sunny pattern on ``days`` (auto-selected when omitted)."""
    if days is None:
        days = select_sunny_days(series)
        if not days:
            raise FitError("no sunny day candidates found")
    days = sorted(int(d) for d in days)
    masks = [daylight_mask(series.subset([d]))[0] for d in days]
    spans = [m for m in masks if m is not None]
    if not spans:
        raise FitError("selected days have no daylight")
    lo = min(m.k1 for m in spans)
    hi = max(m.k2 for m in spans) + 1
    N = series.N
    mean_day = np.nanmean(series.values[days], axis=0)
    cp = detect_control_points(mean_day[lo + N : hi + N], (lo, hi))
    if cp.defaulted:
        log.info("control points defaulted to terciles (%d, %d)", cp.k1, cp.k2)
    return fit_sunny([series.values[d] for d in days], cp, (lo, hi), (0, series.n_days - 1), days)


def daylight_block(series: PowerSeries, model: ClearSkyModel, days=None):
    N = series.N
    lo, hi = model.daylight
    days = range(series.n_days) if days is None else days
    s = model.profile(N)[lo + N : hi + N]
    W = np.array([series.values[n, lo + N : hi + N] for n in days])
    return W, np.tile(s, (W.shape[0], 1))


def estimate_sigma_oc(series: PowerSeries, model: ClearSkyModel, sigma_s: float, width: int = 8, alpha_max: float = 0.9):
    """Pooled residual spread of the calmest attenuated windows.

    Windows whose fitted attenuation is at most ``alpha_max`` are ranked by
    residual RMS; those within twice the 20th-percentile RMS are taken to be
    overcast and their residuals pooled.
    """
    W, S = daylight_block(series, model)
    rms, resid = [], []
    keep = S[0] > 0.05 * S[0].max()
    for w, s in zip(W, S):
        for start in range(0, w.size - width + 1, width):
            seg = slice(start, start + width)
            ok = keep[seg] & np.isfinite(w[seg])
            if ok.sum() < width // 2:
                continue
            try:
                a = estimate_alpha(w[seg][ok], s[seg][ok])
            except ClassificationError:
                continue
            if not 0 < a <= alpha_max:
                continue
            r = w[seg][ok] - a * s[seg][ok]
            rms.append(float(np.sqrt(np.mean(r * r))))
            resid.append(r)
    if len(rms) < 2:
        log.warning("too few attenuated windows; sigma_oc falls back to 2 sigma_s")
        return 2.0 * sigma_s
    rms = np.array(rms)
    cut = 2.0 * np.quantile(rms, 0.2)
    pooled = np.concatenate([r for r, v in zip(resid, rms) if v <= cut])
    return estimate_sigmas(np.full(10, sigma_s), pooled, series.nameplate)[1] * np.sqrt(width / (width - 1))


def partly_cloudy_runs(series, model, thresholds, hmm, window=4, min_len=4):
    """Maximal runs of samples whose trailing window classifies partly cloudy."""
    N = series.N
    s_day = model.profile(N)
    lo, hi = model.daylight
    out = []
    for n in range(series.n_days):
        w_day = series.values[n]
        flags = np.zeros(2 * N, dtype=bool)
        for k2 in range(lo + window - 1, hi):
            k1 = k2 - window + 1
            try:
                d = classify(w_day[k1 + N : k2 + N + 1], s_day[k1 + N : k2 + N + 1], thresholds, hmm)
            except ClassificationError:
                continue
            if d.regime == Regime.PARTLY_CLOUDY:
                flags[k1 + N : k2 + N + 1] = True
        flags &= np.isfinite(w_day) & (s_day > thresholds.s_floor)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], flags.astype(int), [0]])))
        for a, b in zip(edges[::2], edges[1::2]):
            if b - a >= min_len:
                out.append((w_day[a:b], s_day[a:b]))
    return out


@dataclass
class TrainedModels:
    clearsky: ClearSkyModel
    filter: DiffuseFilter
    hmm: PartlyCloudyHmm
    thresholds: Thresholds
    ar: ArModel | None = None
    sar: ArModel | None = None
    dictionary: dict | None = None
    nameplate: float = 3740.0

    def forecast_models(self) -> ForecastModels:
        return ForecastModels(self.clearsky, self.hmm, self.thresholds, self.nameplate)


def train_dictionary(series, model, cfg: PipelineConfig):
    W, S = daylight_block(series, model)
    keep = np.all(np.isfinite(W), axis=1)
    lam = cfg.lambdas if cfg.lambdas is not None else default_lambdas(S)
    return learn_dictionary(W[keep], S[keep], cfg.M, lam, cfg.outer_iters)


def train_hmm(series, model, filt, cfg: PipelineConfig, sigma_oc=None):
    sigma_s = max(model.residual_std, 1e-3 * series.nameplate)
    if sigma_oc is None:
        sigma_oc = estimate_sigma_oc(series, model, sigma_s, alpha_max=cfg.alpha_max)
    th = Thresholds(sigma_s, sigma_oc, cfg.mu, cfg.mu_oc, cfg.alpha_max)
    hmm = make_hmm(filt, cfg.ell, rates=cfg.rates, epsilon_s=sigma_s, sigma_s=sigma_s, sigma_oc=sigma_oc)
    runs = partly_cloudy_runs(series, model, th, hmm, cfg.window)
    if runs:
        hmm = train_segmental_kmeans(hmm, runs).hmm
    else:
        log.warning("no partly-cloudy runs found; transition matrix left at its prior")
    return hmm, th


def train_pipeline(series: PowerSeries, cfg: PipelineConfig | None = None, sunny_days=None, baselines=True) -> TrainedModels:
    cfg = cfg or PipelineConfig()
    cfg.validate()
    cs = fit_clearsky(series, sunny_days)
    dic = train_dictionary(series, cs, cfg)
    hmm, th = train_hmm(series, cs, dic.filter, cfg)
    ar = sar = None
    if baselines:
        ar, sar = fit_baselines(series, cs, th, hmm, cfg.window, cfg.ar_order)
    return TrainedModels(cs, dic.filter, hmm, th, ar, sar, dic.to_dict(), series.nameplate)


def thresholds_from(hmm: PartlyCloudyHmm, cfg: PipelineConfig) -> Thresholds:
    if hmm.sigma_s is None or hmm.sigma_oc is None:
        raise ValidationFailure("hmm.json lacks sigma_s / sigma_oc")
    return Thresholds(float(hmm.sigma_s), float(hmm.sigma_oc), cfg.mu, cfg.mu_oc, cfg.alpha_max)


def _forecast_chunk(args):
    series, fm, tm_ar, tm_sar, cfg, days, with_baselines = args
    table = rolling_evaluate(series, fm, cfg.window, cfg.horizon, days=days)
    if with_baselines:
        table.extend(rolling_baselines(series, fm.clearsky, fm.thresholds, fm.hmm, tm_ar, tm_sar, cfg.window, cfg.horizon, days=days))
    return table


def forecast_all(series, fm: ForecastModels, ar, sar, cfg: PipelineConfig, with_baselines=True) -> ForecastTable:
    days = list(range(series.n_days))
    if cfg.jobs <= 1 or len(days) < 2:
        parts = [_forecast_chunk((series, fm, ar, sar, cfg, days, with_baselines))]
    else:
        chunks = [c.tolist() for c in np.array_split(days, min(cfg.jobs, len(days)))]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            parts = list(ex.map(_forecast_chunk, [(series, fm, ar, sar, cfg, c, with_baselines) for c in chunks]))
    # method-major, then day order, whatever the chunking
    table = ForecastTable()
    for method in ("proposed", "diurnal", "smart_persistence", "ar", "switching_ar"):
        for part in parts:
            table.extend(part.select(np.asarray(part.method) == method))
    return table


FORECAST_HEADER = ["day", "k", "k_tau", "regime", "point_w", "lo90_w", "hi90_w", "lo50_w", "hi50_w", "method", "dist"]


def write_forecasts(table: ForecastTable, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(FORECAST_HEADER)
        for row in table.rows((0.1, 0.5)):
            day, k, kt, regime, point, l90, h90, l50, h50, method, dist = row
            wr.writerow([day, k, kt, regime, f"{point:.10g}", f"{l90:.10g}", f"{h90:.10g}",
                         f"{l50:.10g}", f"{h50:.10g}", method, dist])


def read_forecasts(path) -> ForecastTable:
    if not Path(path).is_file():
        raise MissingArtifact(path)
    table = ForecastTable()
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = set(FORECAST_HEADER) - set(rd.fieldnames or [])
        if missing:
            raise ValidationFailure(f"forecast file lacks columns {sorted(missing)}")
        for row in rd:
            k = int(row["k"])
            kt = int(row["k_tau"])
            table.add(row["method"], int(row["day"]), k - kt, k, kt, row["regime"], float(row["point_w"]), from_spec(row["dist"]))
    return table


# ------------------------------------------------------------------ commands


def cmd_simulate(args, cfg):
    if args.config is None and args.scenario is None:
        scen = ScenarioConfig()
    else:
        raw = _load_json(args.scenario or args.config)
        if "scenario" in raw:
            raw = raw["scenario"]
        else:
            raw = {k: v for k, v in raw.items() if k != "pipeline"}
        scen = ScenarioConfig.from_dict(raw)
    # a seed in the scenario file counts as config-level, below flag and env
    explicit = args.seed is not None or "PVREGIME_SEED" in os.environ
    seed = cfg.seed if explicit or scen.seed == ScenarioConfig.seed else scen.seed
    scen = replace(scen, seed=seed)
    if args.n_days is not None:
        scen = replace(scen, n_days=args.n_days, schedule=None if scen.schedule is None else scen.schedule[: args.n_days])
    data = generate(scen)
    write_csv(data.series, args.out)
    labels = args.labels or str(Path(args.out).with_suffix("")) + ".labels.json"
    _write_json(labels, data.labels_dict())
    return {"out": args.out, "labels": labels, "n_days": data.series.n_days, "seed": seed}


def cmd_fit_sunny(args, cfg):
    series = _ingest(args.input, cfg)
    days = None if args.days is None else [int(x) for x in args.days.split(",") if x.strip()]
    model = fit_clearsky(series, days)
    _write_json(args.out, model.to_dict())
    return {"out": args.out, "fit_days": list(model.fit_days), "control_points": list(model.control_points),
            "residual_std": model.residual_std}


def cmd_learn_dictionary(args, cfg):
    series = _ingest(args.input, cfg)
    model = ClearSkyModel.from_dict(_load_json(args.clearsky))
    res = train_dictionary(series, model, cfg)
    out = res.to_dict()
    out["M"] = cfg.M
    _write_json(args.out, out)
    return {"out": args.out, "taps": list(res.filter.taps), "max_nmse": float(res.nmse.max()) if len(res.nmse) else None,
            "outer_iterations": len(res.objective)}


def cmd_train_hmm(args, cfg):
    series = _ingest(args.input, cfg)
    model = ClearSkyModel.from_dict(_load_json(args.clearsky))
    dic = _load_json(args.dict)
    filt = DiffuseFilter.from_dict(dic["filter"])
    if filt.M != cfg.M:
        raise ValidationFailure(f"dictionary filter has M={filt.M} but M={cfg.M} was requested")
    hmm, th = train_hmm(series, model, filt, cfg)
    _write_json(args.out, hmm.to_dict())
    return {"out": args.out, "n_states": hmm.n_states, "sigma_s": th.sigma_s, "sigma_oc": th.sigma_oc}


def cmd_forecast(args, cfg):
    if args.models is None:
        raise MissingArtifact("--models <dir>")
    mdir = Path(args.models)
    if not mdir.is_dir():
        raise MissingArtifact(mdir)
    cs = ClearSkyModel.from_dict(_load_json(mdir / "clearsky.json"))
    hmm = PartlyCloudyHmm.from_dict(_load_json(mdir / "hmm.json"))
    if hmm.M != cfg.M and args.M is not None:
        raise ValidationFailure(f"hmm has M={hmm.M} but M={cfg.M} was requested")
    th = thresholds_from(hmm, cfg)
    series = _ingest(args.input, cfg)
    fm = ForecastModels(cs, hmm, th, series.nameplate)
    ar = sar = None
    if not args.no_baselines:
        train = series if args.train is None else _ingest(args.train, cfg)
        ar, sar = fit_baselines(train, cs, th, hmm, cfg.window, cfg.ar_order)
    table = forecast_all(series, fm, ar, sar, cfg, not args.no_baselines)
    write_forecasts(table, args.out)
    return {"out": args.out, "records": len(table), "methods": table.methods()}


def cmd_evaluate(args, cfg):
    table = read_forecasts(args.forecasts)
    series = _ingest(args.actual, cfg)
    skip = set() if args.skip_days is None else {int(x) for x in args.skip_days.split(",") if x.strip()}
    if skip:
        table = table.select(~np.isin(np.asarray(table.day), list(skip)))
    scores = evaluate_all(table, series)
    write_report(scores, args.out)
    return {
        "out": args.out,
        "methods": sorted(scores),
        "rmse_k12": {m: float(s.rmse[-1]) for m, s in sorted(scores.items())},
        "mean_normalized_score": {m: s.mean_normalized_score() for m, s in sorted(scores.items())},
    }


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-sunny": cmd_fit_sunny,
    "learn-dictionary": cmd_learn_dictionary,
    "train-hmm": cmd_train_hmm,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (flags override it)")
    common.add_argument("--json", action="store_true", help="print a JSON run summary on stdout")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--sample-period", type=int, dest="sample_period")
    common.add_argument("--nameplate", type=float)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="pvregime", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scenario")
    s.add_argument("--scenario", help="scenario JSON (defaults to --config)")
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s.add_argument("--n-days", type=int, dest="n_days")

    s = sub.add_parser("fit-sunny", parents=[common], help="fit the clear-sky pattern")
    s.add_argument("--input", required=True)
    s.add_argument("--days", help="comma-separated day indices (auto-selected if omitted)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("learn-dictionary", parents=[common], help="learn the diffuse filter and cloud codes")
    s.add_argument("--input", required=True)
    s.add_argument("--clearsky", required=True)
    s.add_argument("--M", type=int, dest="M")
    s.add_argument("--lambdas", help="lam1,lam2,lam3")
    s.add_argument("--outer-iters", type=int, dest="outer_iters")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-hmm", parents=[common], help="train the partly-cloudy HMM")
    s.add_argument("--input", required=True)
    s.add_argument("--clearsky", required=True)
    s.add_argument("--dict", required=True)
    s.add_argument("--M", type=int, dest="M")
    s.add_argument("--ell", type=int)
    s.add_argument("--window", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("forecast", parents=[common], help="rolling-horizon forecasts")
    s.add_argument("--input", required=True)
    s.add_argument("--models", help="directory with clearsky.json and hmm.json")
    s.add_argument("--train", help="series used to fit the AR baselines (default: --input)")
    s.add_argument("--M", type=int, dest="M")
    s.add_argument("--window", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--no-baselines", action="store_true", dest="no_baselines")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common], help="score forecasts against observations")
    s.add_argument("--forecasts", required=True)
    s.add_argument("--actual", required=True)
    s.add_argument("--skip-days", dest="skip_days", help="comma-separated day indices to leave out")
    s.add_argument("--out", required=True)
    return p


_OVERRIDES = ("M", "ell", "window", "horizon", "outer_iters", "jobs", "sample_period", "nameplate")


def _resolve_seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PVREGIME_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationFailure(f"PVREGIME_SEED must be an integer, got {env!r}") from None
    return cfg.seed


def resolve_config(args) -> PipelineConfig:
    base = {}
    if args.config is not None and args.command != "simulate":
        base = _load_json(args.config)
    elif args.config is not None:
        raw = _load_json(args.config)
        base = raw.get("pipeline", {})
    cfg = PipelineConfig.from_dict(base)
    for name in _OVERRIDES:
        val = getattr(args, name, None)
        if val is not None:
            cfg = replace(cfg, **{name: val})
    lam = getattr(args, "lambdas", None)
    if lam is not None:
        try:
            cfg = replace(cfg, lambdas=tuple(float(x) for x in lam.split(",")))
        except ValueError:
            raise ValidationFailure(f"bad --lambdas {lam!r}") from None
        if len(cfg.lambdas) != 3:
            raise ValidationFailure("--lambdas needs three values")
    cfg = replace(cfg, seed=_resolve_seed(args, cfg))
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        np.random.seed(cfg.seed)
        summary = COMMANDS[args.command](args, cfg)
    except MissingArtifact as exc:
        print(f"pvregime: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationFailure, ConfigError, FitError, IngestError, ValueError) as exc:
        print(f"pvregime: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.json:
        summary = {"command": args.command, "config": _jsonable(asdict(cfg)), **summary}
        print(json.dumps(_jsonable(summary), sort_keys=True))
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


if __name__ == "__main__":
    sys.exit(main())
