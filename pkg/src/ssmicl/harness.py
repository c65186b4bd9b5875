"""Datasets, training, evaluation and the fronthaul / SNR sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .accounting import count_flops, count_params
from .channel import (CONSTELLATION_NAMES, sample_channels, sample_deployment,
                      sample_symbols, sample_task, transmit_data, transmit_pilots)
from .lmmse import lmmse_block
from .prompt import LsfScaler, build_prompt, token_width, tokenize
from .quant import Codebook, lloyd_max_gaussian, quantize_block
from .ssm import SSMConfig, SSMICLModel
from .transformer import TICLModel, TransformerConfig


def bits_label(bits) -> str:
    return "inf" if bits is None or math.isinf(bits) else str(int(bits))


def codebook_for(bits) -> Codebook:
    return lloyd_max_gaussian(math.inf if bits is None else bits)


# ------------------------------------------------------------------- data

@dataclass
class DataConfig:
    num_aps: int = 4
    num_ues: int = 4
    n_ant: int = 2
    n_pilots: int = 8
    area_side: float = 1000.0
    angular_spread_deg: float = 15.0
    snr_db: float = 24.0
    bits: int | None = 8  # None: unlimited fronthaul
    n_tasks: int = 2048
    n_ex: int = 16  # coherence blocks per task
    group_size: int | None = None  # None: drawn from {2, 3, 4}
    normalize_received: bool = True
    max_len: int = 0  # padded length; 0 means 2 + K - 1 + T_P

    @property
    def padded_len(self) -> int:
        return self.max_len or (2 + self.num_ues - 1 + self.n_pilots)

    @property
    def token_dim(self) -> int:
        return token_width(self.num_aps, self.n_ant)


@dataclass
class Dataset:
    tokens: np.ndarray  # (P, L, D), left zero-padded
    valid: np.ndarray  # (P, L) bool
    labels: np.ndarray  # (P,) complex
    constellation: np.ndarray  # (P,) int
    task_index: np.ndarray  # (P,) int
    ue: np.ndarray  # (P,) int
    lmmse: np.ndarray  # (P,) complex, LMMSE estimate of the same symbol
    lsf: LsfScaler
    config: DataConfig
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def targets(self) -> np.ndarray:
        return np.stack([self.labels.real, self.labels.imag], axis=-1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.valid[idx], self.labels[idx], self.constellation[idx],
                       self.task_index[idx], self.ue[idx], self.lmmse[idx], self.lsf,
                       self.config, self.split)

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "lsf": asdict(self.lsf), "split": self.split}
        np.savez(path, tokens=self.tokens, valid=self.valid, labels=self.labels,
                 constellation=self.constellation, task_index=self.task_index, ue=self.ue,
                 lmmse=self.lmmse, meta=json.dumps(meta))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["tokens"], z["valid"], z["labels"], z["constellation"], z["task_index"],
                       z["ue"], z["lmmse"], LsfScaler(**meta["lsf"]), DataConfig(**meta["config"]),
                       meta["split"])


def sample_tasks(cfg: DataConfig, seed: int):
    """Tasks (each on its own deployment) plus one block generator per task."""
    tasks, block_rngs = [], []
    for ss in np.random.SeedSequence(seed).spawn(cfg.n_tasks):
        task_ss, block_ss = ss.spawn(2)
        rng = np.random.default_rng(task_ss)
        dep = sample_deployment(rng, cfg.num_aps, cfg.num_ues, cfg.area_side)
        tasks.append(sample_task(dep, cfg.snr_db, rng, n_ant=cfg.n_ant, n_pilots=cfg.n_pilots,
                                 group_size=cfg.group_size,
                                 angular_spread_deg=cfg.angular_spread_deg))
        block_rngs.append(np.random.default_rng(block_ss))
    return tasks, block_rngs


def simulate_block(task, codebook: Codebook, rng: np.random.Generator):
    """One coherence block: symbols, quantized pilots (M, N, T_P), quantized data (M, N)."""
    H = sample_channels(task, rng)
    x = sample_symbols(task, rng)
    Yp = transmit_pilots(task, H, rng)
    y = transmit_data(task, H, x, rng)
    Yq, yq = np.empty_like(Yp), np.empty_like(y)
    for m in range(task.num_aps):
        Yq[m], yq[m], _ = quantize_block(Yp[m], y[m], codebook)
    return x, Yq, yq


def generate_dataset(cfg: DataConfig, seed: int, split: str = "train",
                     lsf: LsfScaler | None = None) -> Dataset:
    """n_tasks * n_ex * K prompts; the LSF scaler is fitted here unless given."""
    tasks, block_rngs = sample_tasks(cfg, seed)
    if lsf is None:
        lsf = LsfScaler.fit(np.concatenate([t.large_scale.ravel() for t in tasks]))
    codebook = codebook_for(cfg.bits)
    K, L, D = cfg.num_ues, cfg.padded_len, cfg.token_dim
    P = cfg.n_tasks * cfg.n_ex * K
    tokens = np.zeros((P, L, D))
    valid = np.zeros((P, L), dtype=bool)
    labels = np.empty(P, dtype=complex)
    lmmse = np.empty(P, dtype=complex)
    cons = np.empty(P, dtype=int)
    task_index = np.repeat(np.arange(cfg.n_tasks), cfg.n_ex * K)
    ue = np.tile(np.arange(K), cfg.n_tasks * cfg.n_ex)
    p = 0
    for task, rng in zip(tasks, block_rngs):
        idx = [CONSTELLATION_NAMES.index(c) for c in task.constellations]
        for _ in range(cfg.n_ex):
            x, Yq, yq = simulate_block(task, codebook, rng)
            xh = lmmse_block(task, Yq, yq)
            for k in range(K):
                tok = tokenize(build_prompt(task, Yq, yq, k, cfg.normalize_received), lsf)
                n = len(tok)
                if n > L:
                    raise ValueError(f"prompt of length {n} exceeds padded length {L}")
                tokens[p, L - n:] = tok
                valid[p, L - n:] = True
                labels[p], lmmse[p], cons[p] = x[k], xh[k], idx[k]
                p += 1
    return Dataset(tokens, valid, labels, cons, task_index, ue, lmmse, lsf, cfg, split)


def lmmse_monte_carlo(cfg: DataConfig, seed: int) -> float:
    """LMMSE symbol MSE over n_tasks * n_ex blocks, all UEs, without building prompts."""
    tasks, block_rngs = sample_tasks(cfg, seed)
    codebook = codebook_for(cfg.bits)
    err, n = 0.0, 0
    for task, rng in zip(tasks, block_rngs):
        for _ in range(cfg.n_ex):
            x, Yq, yq = simulate_block(task, codebook, rng)
            err += float(np.sum(np.abs(lmmse_block(task, Yq, yq) - x) ** 2))
            n += len(x)
    return err / n


# ---------------------------------------------------------------- models

def build_model(kind: str, options: dict, data: DataConfig, seed: int):
    options = dict(options)
    if kind == "ssm":
        return SSMICLModel(SSMConfig(token_dim=data.token_dim, **options), seed)
    if kind == "ticl":
        options.setdefault("max_len", data.padded_len)
        return TICLModel(TransformerConfig(token_dim=data.token_dim, **options), seed)
    raise ValueError(f"unknown model kind {kind!r}")


def model_kind(model) -> str:
    if isinstance(model, SSMICLModel):
        return "ssm"
    if isinstance(model, TICLModel):
        return "ticl"
    raise TypeError(type(model).__name__)


def squared_error_loss(model, tokens, valid, targets) -> nx.Tensor:
    """Mean over prompts of |x_hat - x|^2, with x as (Re, Im) pairs."""
    diff = model.forward(tokens, valid) - targets
    return nx.mean(nx.sum_(diff * diff, axis=-1))


def predict(model, ds: Dataset, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(ds), dtype=complex)
    for s in range(0, len(ds), chunk):
        out[s:s + chunk] = model.estimate(ds.tokens[s:s + chunk], ds.valid[s:s + chunk])
    return out


@dataclass
class EvalResult:
    mse: float
    per_constellation: dict
    count: int


def evaluate_estimates(estimates, ds: Dataset) -> EvalResult:
    err = np.abs(np.asarray(estimates) - ds.labels) ** 2
    per = {name: float(err[ds.constellation == i].mean())
           for i, name in enumerate(CONSTELLATION_NAMES) if np.any(ds.constellation == i)}
    return EvalResult(float(err.mean()), per, len(err))


def evaluate_mse(model, ds: Dataset) -> EvalResult:
    """``model`` may be a trained network, "lmmse", or a callable dataset -> estimates."""
    if model == "lmmse":
        return evaluate_estimates(ds.lmmse, ds)
    if callable(model) and not hasattr(model, "forward"):
        return evaluate_estimates(model(ds), ds)
    return evaluate_estimates(predict(model, ds), ds)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 20000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup: int = 0
    cosine_decay: bool = False

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps", "beta1", "beta2", "eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train config field {name} must be positive")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        if self.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
        return lr


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params, self.cfg = list(params), cfg
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> float:
        """Clip the global gradient norm, apply one update; returns the pre-clip norm."""
        c = self.cfg
        norm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params))
        scale = min(1.0, c.clip_norm / (norm + 1e-12))
        self.t += 1
        bc1, bc2 = 1 - c.beta1 ** self.t, 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.assign(p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps))
        return norm


class TrainingAborted(RuntimeError):
    def __init__(self, msg, step, loss_curve):
        super().__init__(msg)
        self.step, self.loss_curve = step, loss_curve


@dataclass
class TrainResult:
    loss_curve: list
    steps: int
    wall_time: float


def train(model, ds: Dataset, cfg: TrainConfig, log=None, log_every: int = 500) -> TrainResult:
    """Minimise the mean squared symbol error with Adam on random mini-batches.

    On a non-finite loss the parameters are restored to the last good step
    and :class:`TrainingAborted` is raised.
    """
    if ds.tokens.shape[-1] != model.config.token_dim:
        raise nx.ShapeError(f"dataset token width {ds.tokens.shape[-1]} != model "
                            f"{model.config.token_dim}")
    params = model.parameters()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    targets = ds.targets
    curve = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(len(ds), size=cfg.batch_size)
        good = [p.value.copy() for p in params]
        for p in params:
            p.zero_grad()
        try:
            with nx.Tape() as tape:
                loss = squared_error_loss(model, ds.tokens[idx], ds.valid[idx], targets[idx])
            tape.backward(loss)
            if not all(np.all(np.isfinite(p.grad)) for p in params):
                raise nx.NumericError("non-finite gradient")
        except nx.NumericError as exc:
            for p, v in zip(params, good):
                p.assign(v)
            raise TrainingAborted(f"step {step}: {exc}", step, curve) from exc
        curve.append(loss.item())
        opt.step(cfg.lr_at(step))
        if log and (step + 1) % log_every == 0:
            recent = float(np.mean(curve[-log_every:]))
            log(f"step {step + 1}/{cfg.steps} loss {recent:.4f} "
                f"({time.perf_counter() - start:.0f}s)")
    return TrainResult(curve, cfg.steps, time.perf_counter() - start)


# ------------------------------------------------------------ experiments

@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    test_tasks: int = 256
    test_group_size: int | None = None  # None: same sharing law as training
    train: TrainConfig = field(default_factory=TrainConfig)
    models: list = field(default_factory=lambda: ["lmmse", "ssm", "ticl"])
    ssm: dict = field(default_factory=lambda: {"n_layers": 2, "state_dim": 32})
    ticl: dict = field(default_factory=lambda: {"n_layers": 2, "d_model": 32, "n_heads": 4})
    bits: list = field(default_factory=lambda: [1, 2, 4, 8])
    snr_list: list = field(default_factory=lambda: [-10.0, 0.0, 10.0, 20.0, 24.0])
    # the SNR sweep trains once at data.snr_db / data.bits and evaluates across SNRs
    snr_protocol: str = "train-once"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config fields {sorted(unknown)}")
        if "data" in d:
            d["data"] = DataConfig(**d["data"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_data(self, **kw) -> DataConfig:
        return DataConfig(**{**asdict(self.data), **kw})

    def test_data(self, **kw) -> DataConfig:
        return self.with_data(**{"n_tasks": self.test_tasks, "group_size": self.test_group_size,
                                 **kw})


@dataclass
class ExperimentResult:
    model: str
    bits: str
    snr_db: float
    test_mse: float
    params: int | None
    flops: int | None
    status: str = "ok"
    wall_time_s: float = 0.0


# wall time is not reproducible, so it lives in the run metadata instead of the CSV
CSV_FIELDS = [f.name for f in fields(ExperimentResult) if f.name != "wall_time_s"]


def results_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        vals = []
        for name in CSV_FIELDS:
            v = getattr(r, name)
            if v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            vals.append(v)
        w.writerow(vals)
    return buf.getvalue()


def _train_and_score(kind, exp: ExperimentConfig, train_ds, test_sets, log):
    """Train one model; return (model, {snr: EvalResult}, status, seconds)."""
    model = build_model(kind, exp.ssm if kind == "ssm" else exp.ticl, train_ds.config, exp.seed)
    t0 = time.perf_counter()
    status = "ok"
    try:
        train(model, train_ds, exp.train, log=log)
    except TrainingAborted as exc:
        if log:
            log(f"{kind}: training aborted ({exc}); evaluating last good parameters")
        status = "aborted"
    scores = {snr: evaluate_mse(model, ds) for snr, ds in test_sets.items()}
    return model, scores, status, time.perf_counter() - t0


def _data_seeds(exp: ExperimentConfig, tag: int):
    ss = np.random.SeedSequence([exp.seed, tag])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def sweep_fronthaul(exp: ExperimentConfig, log=None, keep_models: bool = False):
    """One independently trained model per b; rows for every requested model class."""
    rows, models = [], {}
    for bits in exp.bits:
        b = None if bits is None or (isinstance(bits, float) and math.isinf(bits)) else int(bits)
        train_seed, test_seed = _data_seeds(exp, 0)
        t0 = time.perf_counter()
        train_ds = generate_dataset(exp.with_data(bits=b), train_seed, "train")
        test_ds = generate_dataset(exp.test_data(bits=b), test_seed, "test", train_ds.lsf)
        if log:
            log(f"b={bits_label(b)}: {len(train_ds)} train / {len(test_ds)} test prompts "
                f"({time.perf_counter() - t0:.0f}s)")
        snr = exp.data.snr_db
        if "lmmse" in exp.models:
            rows.append(ExperimentResult("lmmse", bits_label(b), snr,
                                         evaluate_mse("lmmse", test_ds).mse, None, None))
        for kind in ("ssm", "ticl"):
            if kind not in exp.models:
                continue
            model, scores, status, secs = _train_and_score(kind, exp, train_ds, {snr: test_ds}, log)
            rows.append(ExperimentResult(kind, bits_label(b), snr, scores[snr].mse,
                                         count_params(model),
                                         count_flops(model, exp.data.padded_len), status, secs))
            if log:
                log(f"b={bits_label(b)} {kind}: test MSE {scores[snr].mse:.4f}")
            if keep_models:
                models[(kind, bits_label(b))] = model
        del train_ds
    return (rows, models) if keep_models else rows


def sweep_snr(exp: ExperimentConfig, log=None, keep_models: bool = False):
    """Train once at (data.snr_db, data.bits) and evaluate on test sets across SNR."""
    train_seed, test_seed = _data_seeds(exp, 1)
    train_ds = generate_dataset(exp.data, train_seed, "train")
    test_sets = {float(s): generate_dataset(exp.test_data(snr_db=float(s)), test_seed, "test",
                                            train_ds.lsf)
                 for s in exp.snr_list}
    b = bits_label(exp.data.bits)
    rows, models = [], {}
    if "lmmse" in exp.models:
        for s, ds in test_sets.items():
            rows.append(ExperimentResult("lmmse", b, s, evaluate_mse("lmmse", ds).mse, None, None))
    for kind in ("ssm", "ticl"):
        if kind not in exp.models:
            continue
        model, scores, status, secs = _train_and_score(kind, exp, train_ds, test_sets, log)
        for s, res in scores.items():
            rows.append(ExperimentResult(kind, b, s, res.mse, count_params(model),
                                         count_flops(model, exp.data.padded_len), status, secs))
        models[kind] = model
    return (rows, models) if keep_models else rows


def scale_study(layers=(1, 2, 4, 6), widths=(16, 32, 64), lengths=(8, 13, 16, 32, 64, 128),
                token_dim: int = 18, n_heads: int = 8):
    """Analytic parameter and FLOP counts for both model classes on a config grid."""
    rows = []
    for n in layers:
        for w in widths:
            ssm = SSMICLModel(SSMConfig(n_layers=n, state_dim=w, token_dim=token_dim))
            heads = n_heads if w % n_heads == 0 else 1
            tr = TICLModel(TransformerConfig(n_layers=n, d_model=w, n_heads=heads,
                                             token_dim=token_dim, max_len=max(lengths)))
            for L in lengths:
                for kind, m in (("ssm", ssm), ("ticl", tr)):
                    rows.append({"model": kind, "n_layers": n, "width": w, "L": L,
                                 "params": count_params(m), "flops": count_flops(m, L)})
    return rows
