"""Command implementations: build the problem from a config and move data through containers."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container as ct
from .config import RunConfig, validate as validate_config
from .criteria import (
    AOPT, DOPT, EIG, HifiBackend, SurrogateBackend, build_saa_bank, criterion_from_laplace, per_sample_laplace,
    swapping_greedy,
)
from .errors import ConfigError, ContainerError, NonConvergenceError
from .forward import Design, ForwardModel, PDEObservable, SensorGrid, sensor_layout
from .prior import build_prior
from .reduce import (
    DIS, DOS, PCA, ReducedBasis, SampleBank, compute_dis, compute_dos, compute_kle,
    compute_pca, generate_bank,
)
from .surrogate import INNER_ACTIVATION, OUTER_ACTIVATION, ResNet, Surrogate, TrainConfig, encode_dataset, train
from .verify import run_all

log = logging.getLogger(__name__)

BANK_KEYS = ("seed", "problem.", "mesh.", "prior.", "sensors.", "train.n_train")
BASES_KEYS = BANK_KEYS + ("reduce.",)
MODEL_KEYS = BASES_KEYS + ("train.",)
SAA_KEYS = ("seed", "problem.", "mesh.", "prior.", "sensors.", "noise.", "oed.n_saa")


@dataclass
class Options:
    out: Path = Path("out")
    workers: int = 1
    backend: str | None = None
    a_opt: str | None = None
    warmstart: str | None = None


@dataclass
class Setup:
    prior: object
    model: ForwardModel
    sensors: SensorGrid
    pto: PDEObservable
    noise: object


def build_setup(cfg: RunConfig) -> Setup:
    prior = build_prior(cfg["mesh.n"], cfg["prior.gamma"], cfg["prior.kappa"])
    model = ForwardModel(cfg["problem.kind"], prior.mesh)
    sensors = SensorGrid(prior.mesh, sensor_layout(cfg["sensors.layout"], cfg["sensors.d_s"]))
    if cfg["noise.cov_file"]:
        noise = np.atleast_2d(np.loadtxt(cfg["noise.cov_file"]))
        if noise.shape != (sensors.count, sensors.count):
            raise ConfigError(f"noise covariance in {cfg['noise.cov_file']} must be {sensors.count}x{sensors.count}")
    else:
        noise = cfg["noise.sigma"]
    return Setup(prior, model, sensors, PDEObservable(model, sensors), noise)


def _check_digest(meta: dict, digest: str, path):
    if meta.get("digest") != digest:
        raise ContainerError(f"{path} was produced by a different configuration (digest {meta.get('digest')} != {digest})")


def write_text(path: Path, text: str):
    """Write a text artifact unless an identical one exists; a different one is an error."""
    if path.exists():
        if path.read_text(encoding="utf-8") == text:
            return
        raise ContainerError(f"{path} exists with different contents")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


# gen-data

def gen_data(cfg: RunConfig, opts: Options) -> dict:
    setup = build_setup(cfg)
    path = opts.out / "bank"
    digest = cfg.digest(BANK_KEYS)
    if ct.exists(path):
        _, meta = ct.read_container(path, verify=False)
        _check_digest(meta, digest, path)
        log.info("bank %s up to date", path)
    else:
        n = cfg["train.n_train"]
        bank = generate_bank(setup.prior, setup.pto, cfg.seed, n, workers=opts.workers)
        arrays = {
            "parameters": bank.parameters, "observables": bank.observables, "seeds": bank.seeds,
            "sensors": setup.sensors.locations,
            **ct.sparse_arrays("M", setup.prior.M), **ct.sparse_arrays("A", setup.prior.A),
        }
        meta = {
            "digest": digest, "kind": cfg["problem.kind"], "n": n, "seed": cfg.seed,
            "state_solves": bank.state_solves, "linearized_solves": bank.linearized_solves,
        }
        ct.write_container(path, arrays, meta)
        log.info("wrote %d samples to %s (%d state solves)", n, path, bank.state_solves)
    out = {"bank": path}
    if ct.exists(opts.out / "bases"):
        out["rjac"] = ensure_rjac(cfg, opts, setup)
    return out


def load_bank(cfg: RunConfig, opts: Options) -> SampleBank:
    path = opts.out / "bank"
    if not ct.exists(path):
        raise ContainerError(f"{path} missing; run gen-data first")
    arrays, meta = ct.read_container(path)
    _check_digest(meta, cfg.digest(BANK_KEYS), path)
    bank = SampleBank(arrays["parameters"], arrays["observables"], arrays["seeds"])
    bank.state_solves = int(meta["state_solves"])
    return bank


def ensure_rjac(cfg: RunConfig, opts: Options, setup: Setup | None = None) -> Path:
    """Reduced Jacobians of every bank sample in the current bases."""
    path = opts.out / "rjac"
    digest = cfg.digest(BASES_KEYS)
    if ct.exists(path):
        _, meta = ct.read_container(path, verify=False)
        _check_digest(meta, digest, path)
        return path
    setup = setup or build_setup(cfg)
    ib, ob, _ = load_bases(cfg, opts)
    bank = generate_bank(setup.prior, setup.pto, cfg.seed, cfg["train.n_train"], bases=(ib, ob), workers=opts.workers)
    meta = {
        "digest": digest, "n": len(bank), "r_m": ib.rank, "r_f": ob.rank,
        "state_solves": bank.state_solves, "linearized_solves": bank.linearized_solves,
    }
    ct.write_container(path, {"reduced_jacobians": bank.reduced_jacobians, "seeds": bank.seeds}, meta)
    log.info("wrote reduced Jacobians to %s (%d linearized solves)", path, bank.linearized_solves)
    return path


# reduce

def _basis_arrays(prefix, b: ReducedBasis) -> dict:
    return {
        f"{prefix}.psi": b.psi.T, f"{prefix}.dual": b.dual.T, f"{prefix}.values": b.values, f"{prefix}.center": b.center,
    }


def _basis_meta(prefix, b: ReducedBasis) -> dict:
    return {f"{prefix}.kind": b.kind, f"{prefix}.metric": b.metric, f"{prefix}.truncated": b.truncated}


def _basis_from(arrays, meta, prefix) -> ReducedBasis:
    return ReducedBasis(
        meta[f"{prefix}.kind"], arrays[f"{prefix}.psi"].T.copy(), arrays[f"{prefix}.values"], meta[f"{prefix}.metric"],
        arrays[f"{prefix}.center"], arrays[f"{prefix}.dual"].T.copy(), meta[f"{prefix}.truncated"] == "true",
    )


def reduce(cfg: RunConfig, opts: Options) -> Path:
    path = opts.out / "bases"
    digest = cfg.digest(BASES_KEYS)
    if ct.exists(path):
        _, meta = ct.read_container(path, verify=False)
        _check_digest(meta, digest, path)
        log.info("bases %s up to date", path)
        return path
    setup = build_setup(cfg)
    bank = load_bank(cfg, opts)
    n_j = min(cfg["reduce.n_saa_basis"], len(bank))
    jac_bank = None
    if DIS == cfg["reduce.input_kind"] or DOS == cfg["reduce.output_kind"]:
        # same seed and indices as the first bank rows
        jac_bank = generate_bank(setup.prior, setup.pto, cfg.seed, n_j, jacobians=True, workers=opts.workers)
    if cfg["reduce.input_kind"] == DIS:
        ib = compute_dis(setup.prior, jac_bank.jacobians, cfg["reduce.r_m"], seed=cfg.seed)
    else:
        ib = compute_kle(setup.prior, cfg["reduce.r_m"])
    if cfg["reduce.output_kind"] == PCA:
        ob = compute_pca(bank.observables, cfg["reduce.r_f"])
    else:
        ob = compute_dos(setup.prior, jac_bank.jacobians, cfg["reduce.r_f"], bank.observables.mean(axis=0))
    meta = {
        "digest": digest, "jacobian_samples": n_j if jac_bank else 0,
        "linearized_solves": jac_bank.linearized_solves if jac_bank else 0,
        **_basis_meta("input", ib), **_basis_meta("output", ob),
    }
    ct.write_container(path, {**_basis_arrays("input", ib), **_basis_arrays("output", ob)}, meta)
    write_text(opts.out / "spectrum_input.csv", _csv_text(["index", "value"], enumerate(ib.values.tolist())))
    write_text(opts.out / "spectrum_output.csv", _csv_text(["index", "value"], enumerate(ob.values.tolist())))
    log.info("wrote %s (%s r=%d, %s r=%d)", path, ib.kind, ib.rank, ob.kind, ob.rank)
    return path


def load_bases(cfg: RunConfig, opts: Options):
    path = opts.out / "bases"
    if not ct.exists(path):
        raise ContainerError(f"{path} missing; run reduce first")
    arrays, meta = ct.read_container(path)
    _check_digest(meta, cfg.digest(BASES_KEYS), path)
    return _basis_from(arrays, meta, "input"), _basis_from(arrays, meta, "output"), meta


# train

def model_arrays(s: Surrogate) -> dict:
    arrays = {f"net.{i:03d}.{k}": v for i, (k, v) in enumerate(s.net.params.items())}
    arrays.update(_basis_arrays("input", s.input_basis))
    arrays.update(_basis_arrays("output", s.output_basis))
    arrays["loss_curve"] = np.asarray(s.meta["loss_curve"])
    return arrays


def model_meta(s: Surrogate, digest: str) -> dict:
    net = s.net
    meta = {
        "digest": digest, "r_in": net.r_in, "r_out": net.r_out, "width": net.width, "n_resnet": net.n_resnet,
        "inner_activation": INNER_ACTIVATION, "outer_activation": OUTER_ACTIVATION,
        **{k: s.meta[k] for k in ("epochs", "lr", "lambda_jac", "batch", "seed")},
        **_basis_meta("input", s.input_basis), **_basis_meta("output", s.output_basis),
    }
    for k, v in s.meta.get("holdout", {}).items():
        meta[f"holdout.{k}"] = float(v)
    return meta


def read_model(path) -> Surrogate:
    arrays, meta = ct.read_container(path)
    net = ResNet(int(meta["r_in"]), int(meta["r_out"]), int(meta["width"]), int(meta["n_resnet"]))
    for i, k in enumerate(net.shapes()):
        net.params[k] = arrays[f"net.{i:03d}.{k}"]
    extra = {k: meta[k] for k in meta if k.startswith("holdout.") or k in ("seed", "lambda_jac")}
    return Surrogate(_basis_from(arrays, meta, "input"), _basis_from(arrays, meta, "output"), net, extra)


def train_models(cfg: RunConfig, opts: Options) -> Path:
    digest = cfg.digest(MODEL_KEYS)
    final = opts.out / "model"
    if ct.exists(final):
        _, meta = ct.read_container(final, verify=False)
        _check_digest(meta, digest, final)
        log.info("model %s up to date", final)
        return final
    ib, ob, _ = load_bases(cfg, opts)
    bank = load_bank(cfg, opts)
    lam = cfg["train.lambda_jac"]
    if lam != 0:
        rj, _ = ct.read_container(ensure_rjac(cfg, opts))
        bank.reduced_jacobians = rj["reduced_jacobians"]
    data = encode_dataset(bank, ib, ob)
    results = []
    for seed in cfg["train.seeds"]:
        path = opts.out / f"model_s{seed}"
        if ct.exists(path):
            s = read_model(path)
            if s.meta.get("seed") != str(seed):
                raise ContainerError(f"{path} holds a model for seed {s.meta.get('seed')}")
            _, meta = ct.read_container(path, verify=False)
            _check_digest(meta, digest, path)
            err = {k[len("holdout."):]: float(v) for k, v in s.meta.items() if k.startswith("holdout.")}
        else:
            tc = TrainConfig(
                epochs=cfg.epochs(), lr=cfg["train.lr"], lambda_jac=lam, batch=cfg["train.batch"], seed=seed,
                width=cfg["train.width"], n_resnet=cfg["train.n_resnet"],
            )
            s = train(data, ib, ob, tc)
            ct.write_container(path, model_arrays(s), model_meta(s, digest))
            err = s.meta.get("holdout", {})
            log.info("seed %d: held-out errors %s", seed, err)
        results.append((seed, err.get("output", np.nan), err.get("jacobian", np.nan), path))
    write_text(opts.out / "models.csv", _csv_text(
        ["seed", "holdout_output", "holdout_jacobian"], [(s, float(o), float(j)) for s, o, j, _ in results]))
    key = 2 if lam != 0 else 1
    ranked = sorted(results, key=lambda r: (r[key], r[0]))
    chosen = ranked[(len(ranked) - 1) // 2]
    arrays, meta = ct.read_container(chosen[3])
    ct.write_container(final, arrays, meta)
    log.info("selected seed %d as the median model", chosen[0])
    return final


def load_model(cfg: RunConfig, opts: Options) -> Surrogate:
    path = opts.out / "model"
    if not ct.exists(path):
        raise ContainerError(f"{path} missing; run train first")
    _, meta = ct.read_container(path, verify=False)
    _check_digest(meta, cfg.digest(MODEL_KEYS), path)
    return read_model(path)


# map / criteria / design

def _backend(cfg: RunConfig, opts: Options, setup: Setup):
    name = opts.backend or cfg["oed.backend"]
    mode = opts.a_opt or cfg["oed.a_opt"]
    if name == "hifi":
        return HifiBackend(setup.pto, setup.prior, mode)
    warm = opts.warmstart if opts.warmstart is not None else (cfg["oed.warmstart"] or None)
    return SurrogateBackend(load_model(cfg, opts), setup.prior, mode, warm)


def _design(cfg: RunConfig) -> Design:
    sel = cfg["oed.design"] or tuple(range(cfg["oed.r_s"]))
    return Design(sel, cfg["sensors.d_s"])


def _saa(cfg: RunConfig, opts: Options, setup: Setup):
    bank = build_saa_bank(setup.prior, setup.pto, setup.noise, cfg["oed.n_saa"], cfg.seed, opts.workers)
    meta = {"digest": cfg.digest(SAA_KEYS), "n": len(bank), "state_solves": len(bank)}
    ct.write_container(opts.out / "saa", {
        "parameters": bank.parameters, "noise": bank.noise, "observables": bank.observables,
        "noise_cov": bank.noise_cov,
    }, meta)
    return bank


def _laplace_all(cfg, opts):
    setup = build_setup(cfg)
    backend = _backend(cfg, opts, setup)
    bank = _saa(cfg, opts, setup)
    design = _design(cfg)
    results = per_sample_laplace(bank, design, backend, opts.workers)
    failed = sum(r is None for r in results)
    if failed > 0.1 * len(results):
        raise NonConvergenceError(f"{failed} of {len(results)} samples failed", residual=failed)
    return setup, backend, design, results


def _iterations(res):
    st = res.stats
    if "newton_iterations" in st:
        return st["newton_iterations"], st["cg_iterations"]
    return st.get("iterations", 0), 0


def map_points(cfg: RunConfig, opts: Options) -> Path:
    setup, backend, design, results = _laplace_all(cfg, opts)
    tag = backend.name.lower()
    ok = [(n, r) for n, r in enumerate(results) if r is not None]
    arrays = {
        "sample": np.array([n for n, _ in ok], dtype=np.uint64),
        "m_map": np.stack([r.m_map for _, r in ok]),
        "eigvals": np.stack([r.eigvals[: len(design)] for _, r in ok]),
        "design": np.asarray(design.selected, dtype=np.uint32),
    }
    meta = {"digest": cfg.digest(MODEL_KEYS + SAA_KEYS + ("oed.",)), "backend": backend.name, "failed": len(results) - len(ok)}
    path = opts.out / f"map_{tag}"
    ct.write_container(path, arrays, meta)
    rows = [(n, i, float(v)) for n, r in ok for i, v in enumerate(r.eigvals[: len(design)])]
    write_text(opts.out / f"eigvals_{tag}.csv", _csv_text(["sample", "index", "eigenvalue"], rows))
    return path


def criteria(cfg: RunConfig, opts: Options) -> Path:
    setup, backend, design, results = _laplace_all(cfg, opts)
    rows = []
    for n, r in enumerate(results):
        if r is None:
            continue
        vals = [criterion_from_laplace(k, r, setup.prior, backend.a_opt_mode) for k in (AOPT, DOPT, EIG)]
        rows.append((n, *[float(v) for v in vals], *_iterations(r)))
    path = opts.out / f"criteria_{backend.name.lower()}.csv"
    write_text(path, _csv_text(["sample", AOPT, DOPT, EIG, "N_nt", "N_cg"], rows))
    means = np.mean([row[1:4] for row in rows], axis=0)
    log.info("mean criteria over %d samples: AOpt %.6g DOpt %.6g EIG %.6g", len(rows), *means)
    return path


def design(cfg: RunConfig, opts: Options) -> Path:
    setup = build_setup(cfg)
    backend = _backend(cfg, opts, setup)
    bank = _saa(cfg, opts, setup)
    res = swapping_greedy(
        bank, cfg["oed.criterion"], backend, cfg["sensors.d_s"], cfg["oed.r_s"], cfg["oed.k_max"], cfg["oed.eps_min"],
        opts.workers,
    )
    tag = backend.name.lower()
    trace_rows = [(s, p, c, float(v), "true" if a else "false") for s, p, c, v, a in res.trace]
    write_text(opts.out / f"trace_{tag}.csv", _csv_text(["step", "phase", "candidate", "criterion", "accepted"], trace_rows))
    chosen = set(res.design.selected)
    loc = setup.sensors.locations
    write_text(opts.out / f"sensors_{tag}.csv", _csv_text(
        ["index", "x", "y", "selected"], [(i, float(x), float(y), int(i in chosen)) for i, (x, y) in enumerate(loc)]))
    path = opts.out / f"design_{tag}"
    ct.write_container(path, {"selected": np.asarray(res.design.selected, dtype=np.uint32)}, {
        "criterion": cfg["oed.criterion"], "backend": backend.name, "value": float(res.value),
        "evaluations": res.evaluations,
    })
    log.info("design %s with %s = %.6g", res.design.selected, cfg["oed.criterion"], res.value)
    return path


# verify

def verify(cfg: RunConfig, opts: Options):
    checks = run_all(cfg.seed)
    rows = [(c.name, float(c.value), float(c.tol), "pass" if c.passed else "fail") for c in checks]
    write_text(opts.out / "verify.csv", _csv_text(["check", "value", "tol", "result"], rows))
    ct.write_container(opts.out / "verify", {
        "value": np.array([c.value for c in checks]), "tol": np.array([c.tol for c in checks]),
        "passed": np.array([c.passed for c in checks], dtype=np.uint64),
    }, {"names": [c.name for c in checks], "seed": cfg.seed})
    return checks
