"""Task dispatch: config in, metrics CSV plus artifacts and a manifest out."""
from __future__ import annotations

import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .. import dlvm, ebm, score_diffusion as sd, vi
from ..diffcore import NonFiniteError, RngStream
from ..nets import BNN, Architecture, GaussianPrior, ParamVector, likelihood_from_dict
from ..predictive import PosteriorHandle, posterior_predictive
from ..sgmcmc import Chain, DivergenceError, SamplerConfig, run_chain, schedule_from_dict
from . import datasets, io, oracles
from .config import ExperimentConfig, ScoreMethod, load_config
from .gradcheck_suite import run_gradchecks

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_DIVERGED, EXIT_ERROR = 0, 1, 2, 3, 4
MAX_SERIES_ROWS = 2000


class Run:
    """Per-run state shared by task functions."""

    def __init__(self, cfg: ExperimentConfig, out: Path, chains: int):
        self.cfg, self.out, self.chains = cfg, out, chains
        self.rows: list = []
        self.artifacts: list[str] = []
        self.passed = True

    def series(self, split: str, metric: str, values):
        every = max(1, math.ceil(len(values) / MAX_SERIES_ROWS))
        self.rows.extend(io.series_rows(split, metric, values, every))

    def final(self, step: int, metric: str, value: float, split: str = "eval"):
        self.rows.append((step, split, metric, float(value)))

    def artifact(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def rng(self, stream_id: int = 0) -> RngStream:
        return RngStream(self.cfg.seed, stream_id)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> BNN:
    m = cfg.model
    arch = Architecture(tuple(m.arch.layer_sizes), m.arch.activation)
    lik = likelihood_from_dict(m.likelihood.model_dump(exclude_none=True))
    return BNN(arch, lik, GaussianPrior(m.prior.scale))


def build_data(cfg: ExperimentConfig):
    """A Dataset, or a DensityTarget for the correlated Gaussian."""
    dcfg, seed = cfg.data, cfg.data_seed()
    if dcfg is None:
        return None
    kind = dcfg.kind
    if kind == "regression_1d":
        return datasets.regression_1d(dcfg.n, dcfg.noise, seed)
    if kind == "two_moons":
        return datasets.two_moons(dcfg.n, dcfg.noise, seed)
    if kind == "gaussian_mixture_1d":
        return datasets.gaussian_mixture_1d(dcfg.weights, dcfg.means, dcfg.stds, dcfg.n, seed)
    if kind == "correlated_gaussian_2d":
        return datasets.correlated_gaussian_2d(dcfg.mean, dcfg.cov)
    if kind == "blr":
        return datasets.blr(dcfg.n, dcfg.d, dcfg.sigma, dcfg.tau, seed, dcfg.true_w)
    if kind == "ppca":
        x = dlvm.PPCAModel(dcfg.W, dcfg.b, dcfg.sigma).sample(dcfg.n, RngStream(seed, datasets.DATA_STREAM))
        return datasets.Dataset(x)
    raise ValueError(f"unknown dataset kind {kind!r}")


def _single_gaussian(cfg: ExperimentConfig):
    """(mean, var) when the data section is a one-component mixture, else None."""
    dcfg = cfg.data
    if dcfg is not None and dcfg.kind == "gaussian_mixture_1d" and len(dcfg.weights) == 1:
        return dcfg.means[0], dcfg.stds[0] ** 2
    return None


def _blr_oracle(cfg: ExperimentConfig, model: BNN, ds):
    """Exact posterior when the model is a linear-Gaussian regression on blr data."""
    if cfg.data.kind != "blr" or model.arch.n_layers != 1 or model.likelihood.to_dict()["kind"] != "gaussian":
        return None
    return oracles.exact_blr_posterior(datasets.design_with_bias(ds.x), ds.y, model.likelihood.sigma,
                                       model.prior.scale)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

def _chain_worker(args) -> Chain:
    model_dict, x, y, sampler, schedule, n_steps, seed, stream_id = args
    model = BNN.from_dict(model_dict)
    return run_chain(model, (x, y), SamplerConfig(**sampler), schedule_from_dict(schedule), n_steps,
                     RngStream(seed, stream_id))


def task_sampler(run: Run, m):
    cfg = run.cfg
    model = build_model(cfg)
    ds = build_data(cfg)
    sampler = dict(kind=cfg.task, batch_size=m.batch_size, burn_in=m.burn_in, thin=m.thin,
                   friction=m.friction, mass=m.mass, collect_below=m.collect_below)
    jobs = [(model.to_dict(), ds.x, ds.y, sampler, m.schedule, m.n_steps, cfg.seed, i + 1)
            for i in range(run.chains)]
    if run.chains == 1:
        chains = [_chain_worker(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=run.chains) as pool:
            chains = list(pool.map(_chain_worker, jobs))  # stream_id order
    samples = np.concatenate([c.samples for c in chains])
    io.write_chain(run.artifact("chain.bin"), samples, chains[0].burn_in, chains[0].thin)
    for i, c in enumerate(chains):
        run.series(f"chain{i + 1}", "energy", c.energies)
    T = m.n_steps
    run.final(T, "n_samples", len(samples))
    oracle = _blr_oracle(cfg, model, ds)
    if oracle is not None and len(samples):
        mean, cov, _ = oracle
        run.final(T, "mean_rel_err", np.linalg.norm(samples.mean(0) - mean) / np.linalg.norm(mean))
        run.final(T, "var_max_rel_err", np.max(np.abs(samples.var(0) / np.diag(cov) - 1.0)))


def task_vi(run: Run, m):
    cfg = run.cfg
    data = build_data(cfg)
    if isinstance(data, vi.DensityTarget):
        target, pair, model = data, None, None
    else:
        model = build_model(cfg)
        target, pair = model, data.pair()
    res = vi.fit_vi(vi.VIConfig(**m.model_dump()), target, pair, run.rng(1))
    q = res.q
    io.write_json(run.artifact("q.json"), {"q": q.to_dict(), "model": None if model is None else model.to_dict()})
    run.series("train", "bound", res.trace)
    T = m.steps
    for i, (mu, v) in enumerate(zip(q.mu, q.variance)):
        run.final(T, f"mean_{i}", mu)
        run.final(T, f"variance_{i}", v)
    if model is not None:
        oracle = _blr_oracle(cfg, model, data)
        if oracle is not None:
            mean, cov, log_ev = oracle
            run.final(T, "mean_rel_err", np.linalg.norm(q.mu - mean) / np.linalg.norm(mean))
            run.final(T, "log_evidence", log_ev)


def _load_posterior(path: str):
    raw = Path(path).read_bytes()
    if raw.startswith(io.CHAIN_MAGIC):
        samples, header = io.read_chain(path)
        return "chain", samples, None
    d = json.loads(raw)
    return "variational", vi.q_from_dict(d["q"]), d.get("model")


def task_predict(run: Run, m):
    cfg = run.cfg
    kind, post, model_dict = _load_posterior(m.posterior)
    rng = run.rng(1)
    if kind == "chain":
        handle = PosteriorHandle.from_chain(Chain(post, np.arange(len(post)), 0, 1))
    else:
        handle = PosteriorHandle.from_q(post, m.n_draws, rng)
    if cfg.model is not None:
        model = build_model(cfg)
    elif model_dict is not None:
        model = BNN.from_dict(model_dict)
    else:
        model = None
    out = {}
    if model is None:
        # bare density posterior: report moments of the draws
        draws = handle.members()
        out = {"draw_mean": draws.mean(0).tolist(), "draw_var": draws.var(0).tolist()}
        for i, (a, b) in enumerate(zip(out["draw_mean"], out["draw_var"])):
            run.final(1, f"draw_mean_{i}", a)
            run.final(1, f"draw_var_{i}", b)
    else:
        if m.x_star is None:
            raise ValueError("predict with a model needs method.x_star")
        s = posterior_predictive(handle, model, np.asarray(m.x_star, dtype=np.float64))
        for name in ("mean", "variance", "probs", "total", "aleatoric", "epistemic", "mi_kl"):
            val = getattr(s, name)
            if val is None:
                continue
            out[name] = np.asarray(val).tolist()
            for i, v in enumerate(np.asarray(val).reshape(len(m.x_star), -1)):
                for j, vv in enumerate(v):
                    run.final(1, f"{name}_{i}_{j}" if v.size > 1 else f"{name}_{i}", vv)
    io.write_json(run.artifact("predictions.json"), out)


def task_ebm(run: Run, m):
    cfg = run.cfg
    ds = build_data(cfg)
    layer_sizes = tuple(cfg.model.arch.layer_sizes) if cfg.model else (ds.x.shape[1], 32, 32, 1)
    activation = cfg.model.arch.activation if cfg.model else "tanh"
    conf = ebm.EBMConfig(layer_sizes, activation, m.steps, m.batch_size, m.langevin_steps, m.langevin_alpha,
                         m.lr, m.optimizer, ebm.InitStrategy(**m.init.model_dump()),
                         None if m.box is None else tuple(m.box), m.energy_l2, m.anneal_t0, m.ais)
    res = ebm.train_ebm(conf, ds.x, run.rng(1))
    np.save(run.artifact("params.npy"), res.model.params)
    for k, v in res.metrics.items():
        run.series("train", k, v)
    if ds.x.shape[1] == 1 and m.box is not None:
        grid = oracles.grid_normalize(res.model, m.box, m.grid_points)
        run.final(m.steps, "log_z", grid.log_z)
        if cfg.data.kind == "gaussian_mixture_1d":
            true = oracles.mixture_pdf_1d(grid.grid, cfg.data.weights, cfg.data.means, cfg.data.stds)
            run.final(m.steps, "tv", oracles.total_variation(grid.density, true, grid.spacing))
        with open(run.artifact("density.csv"), "w") as f:
            f.write("x,density\n")
            for x, p in zip(grid.grid, grid.density):
                f.write(f"{io.format_float(x)},{io.format_float(p)}\n")


def _score_config(m) -> sd.ScoreConfig:
    return sd.ScoreConfig(m.mode, tuple(m.hidden), m.activation, m.steps, m.batch_size, m.lr, m.lr_floor,
                          m.sigma_max, m.sigma_min, m.n_scales, m.beta_min, m.beta_max, m.ema)


def task_score(run: Run, m):
    cfg = run.cfg
    ds = build_data(cfg)
    conf = _score_config(m)
    res = sd.train_score(conf, ds.x, run.rng(1))
    np.save(run.artifact("params.npy"), res.net.params)
    run.series("train", "loss", res.losses)
    T = m.steps
    gauss = _single_gaussian(cfg)
    if gauss is not None and ds.x.shape[1] == 1:
        mu, var = gauss
        xs = np.linspace(mu - 3 * math.sqrt(var), mu + 3 * math.sqrt(var), 61)[:, None]
        for s in m.eval_sigmas:
            err = res.net(xs, s) + (xs - mu) / (var + s * s)
            run.final(T, f"score_rmse_sigma_{s:g}", math.sqrt(float((err ** 2).mean())))
    if m.mode == "ncsn":
        x = sd.annealed_langevin_sample(res.net, conf.ladder(), m.steps_per_scale, m.eps0, run.rng(2),
                                        n=m.n_samples, d=ds.x.shape[1])
        np.save(run.artifact("samples.npy"), x)
        run.final(T, "sample_mean", float(x.mean()))
        run.final(T, "sample_var", float(x.var()))


def task_diffuse(run: Run, m):
    cfg = run.cfg
    sde = sd.SDEConfig(m.beta_min, m.beta_max, m.n_steps)
    gauss = _single_gaussian(cfg)
    mu, var = gauss if gauss is not None else (0.0, 1.0)
    if mu != 0.0:
        raise ValueError("diffuse task expects zero-mean Gaussian data")
    if m.score == "analytic":
        score = sd.vp_analytic_score(sde, var)
    else:
        if cfg.data is None:
            raise ValueError("learned score needs a data section")
        train = (m.train or ScoreMethod()).model_copy(update={"mode": "vp", "beta_min": m.beta_min,
                                                                      "beta_max": m.beta_max})
        res = sd.train_score(_score_config(train), build_data(cfg).x, run.rng(1))
        np.save(run.artifact("params.npy"), res.net.params)
        run.series("train", "loss", res.losses)
        score = sd.net_time_score(res.net, sde)
    x = sd.pc_sample(score, sde, run.rng(2), m.n_samples, 1, m.corrector_steps, m.snr)
    np.save(run.artifact("samples.npy"), x)
    run.final(m.n_steps, "sample_mean", float(x.mean()))
    run.final(m.n_steps, "sample_var", float(x.var()))
    run.final(m.n_steps, "target_var", var)


def task_vae(run: Run, m):
    cfg = run.cfg
    ds = build_data(cfg)
    conf = dlvm.VAEConfig(m.d_z, tuple(m.enc_hidden), tuple(m.dec_hidden), m.activation, m.lik_sigma,
                          m.objective, m.iwae_samples, m.steps, m.batch_size, m.lr, m.optimizer,
                          dlvm.RefineConfig(m.refine.steps, m.refine.step_size))
    res = dlvm.train_vae(conf, ds.x, run.rng(1))
    model = res.model
    np.save(run.artifact("params.npy"), model.params())
    run.series("train", "bound", res.bounds)
    T = m.steps
    x = ds.x[:min(len(ds.x), 200)]
    rng = run.rng(2)
    run.final(T, "elbo", float(dlvm.vae_elbo_estimate(model, x, rng).mean()))
    for M in m.eval_m:
        run.final(T, f"iwae_{M}", float(dlvm.iwae_bound_estimate(model, x, M, rng).mean()))
    if not m.dec_hidden:
        (W, b), = ParamVector(model.decoder, model.theta).unflatten()
        ppca = dlvm.PPCAModel(W, b, model.lik_sigma)
        run.final(T, "exact_loglik", float(dlvm.ppca_exact_loglik(ppca, x).mean()))


def task_gradcheck(run: Run, m):
    results = run_gradchecks(m.instances, m.h, run.cfg.seed)
    for r in results:
        run.final(1, f"max_rel_error_{r.name}", r.max_error, split="gradcheck")
        run.passed &= r.passed(m.tol)


def task_oracle(run: Run, m):
    from .oracle_suite import run_oracle_suite
    for check in run_oracle_suite():
        run.final(1, check.name, float(check.passed), split="oracle")
        run.passed &= check.passed


TASK_FUNCS = {
    "sgld": task_sampler, "sghmc": task_sampler, "vi": task_vi, "predict": task_predict,
    "ebm": task_ebm, "score": task_score, "diffuse": task_diffuse, "vae": task_vae,
    "gradcheck": task_gradcheck, "oracle": task_oracle,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _report_error(out: Path | None, payload: dict):
    line = json.dumps(payload, sort_keys=True)
    print(line, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(line + "\n")
        except OSError:
            pass


def run_experiment(config, seed: int | None = None, out_dir: str | None = None, chains: int = 1) -> int:
    """Validate, dispatch and persist one experiment; returns a process exit code.

    ``config`` is a path to a JSON file or an ExperimentConfig. Failures
    print a one-line error JSON to stderr and also write ``error.json``.
    """
    out = Path(out_dir) if out_dir is not None else None
    try:
        if isinstance(config, ExperimentConfig):
            cfg = config.model_copy(update={k: v for k, v in (("seed", seed), ("out_dir", out_dir)) if v is not None})
            cfg = ExperimentConfig.model_validate(cfg.model_dump())
        else:
            cfg = load_config(config, seed, out_dir)
        if chains < 1:
            raise ValueError("--chains must be >= 1")
        settings = cfg.method_settings()
    except (ValidationError, ValueError, OSError, json.JSONDecodeError) as e:
        _report_error(out, {"status": "error", "kind": "validation", "message": str(e)})
        return EXIT_INVALID

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out, chains)
    t0 = time.perf_counter()
    try:
        TASK_FUNCS[cfg.task](run, settings)
    except DivergenceError as e:
        _report_error(out, {"status": "error", "kind": "divergence", "message": str(e), "step": e.step})
        return EXIT_DIVERGED
    except (NonFiniteError, FloatingPointError) as e:
        _report_error(out, {"status": "error", "kind": "divergence", "message": str(e)})
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError) as e:
        _report_error(out, {"status": "error", "kind": "runtime", "message": f"{type(e).__name__}: {e}"})
        return EXIT_ERROR
    wall = time.perf_counter() - t0

    log = io.MetricsLog()
    log.extend(run.rows)
    log.write(run.artifact("metrics.csv"))
    code = EXIT_OK if run.passed else EXIT_CHECK_FAILED
    io.write_json(out / "manifest.json", {
        "task": cfg.task, "seed": cfg.seed, "config_hash": cfg.config_hash(), "config": json.loads(cfg.canonical_json()),
        "version": io.version_string(), "wall_time_s": wall, "chains": chains,
        "artifacts": sorted(run.artifacts), "exit_code": code,
    })
    return code
