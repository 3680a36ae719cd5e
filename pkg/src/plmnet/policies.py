"""Base steering model, timed-action predictor, and their supervised training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import ImitationDataset
from .neural import (Adam, FrozenError, MlpNet, load_checkpoint, mse, params_hash, refit_output_layer,
                     save_checkpoint)
from .simcore import Observation

BM_HEAD_SIZES = (512, 100, 50, 10, 1)
TAPM_BRANCH_WIDTHS = (100, 500, 100)
TAPM_SUBMODEL_SIZES = (200, 100, 50, 1)
DROPOUT = 0.3
SPEED_WIDTH = 144
DEFAULT_DELTA_GRID = (0.15, 0.20, 0.25, 0.30, 0.35)


class TrainingError(RuntimeError):
    pass


class ModelError(RuntimeError):
    pass


@dataclass
class Normalizer:
    feat_mean: np.ndarray
    feat_std: np.ndarray
    v_mean: float
    v_std: float

    @classmethod
    def fit(cls, ds: ImitationDataset) -> "Normalizer":
        # flip augmentation makes the distributions symmetric about zero
        f = np.concatenate([ds.features, -ds.features])
        std = f.std(axis=0)
        std[std < 1e-8] = 1.0
        v_std = float(ds.speed.std())
        return cls(np.zeros(f.shape[1]), std, float(ds.speed.mean()), v_std if v_std > 1e-8 else 1.0)

    @classmethod
    def identity(cls, n_features: int) -> "Normalizer":
        return cls(np.zeros(n_features), np.ones(n_features), 0.0, 1.0)

    def features(self, f: np.ndarray) -> np.ndarray:
        return (f - self.feat_mean) / self.feat_std

    def speed(self, v: np.ndarray) -> np.ndarray:
        return ((np.asarray(v, dtype=float) - self.v_mean) / self.v_std).reshape(-1, 1)

    def to_dict(self) -> dict:
        return {"feat_mean": self.feat_mean.tolist(), "feat_std": self.feat_std.tolist(),
                "v_mean": self.v_mean, "v_std": self.v_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["feat_mean"]), np.array(d["feat_std"]), d["v_mean"], d["v_std"])


class BaseModel:
    """Observation encoder and speed branch feeding a 512/100/50/10/1 head.

    The encoder output is the observation feature vector and the speed branch
    output the speed feature vector; both are handed to the predictor.
    """

    def __init__(self, n_features: int, seed: int = 0, encoder_widths=(64, 64), dropout: float = DROPOUT):
        self.encoder = MlpNet([n_features, *encoder_widths], ["relu"] * len(encoder_widths), seed=seed)
        self.speed_branch = MlpNet([1, SPEED_WIDTH], ["relu"], seed=seed + 1)
        head_acts = ["relu"] * (len(BM_HEAD_SIZES) - 1) + ["identity"]
        head_drop = [dropout, dropout, dropout, 0.0, 0.0]
        self.head = MlpNet([encoder_widths[-1] + SPEED_WIDTH, *BM_HEAD_SIZES], head_acts, head_drop, seed=seed + 2)
        self.normalizer = Normalizer.identity(n_features)
        self._check()

    def _check(self):
        if tuple(self.head.sizes[1:]) != BM_HEAD_SIZES:
            raise ModelError(f"head sizes {self.head.sizes[1:]} != {BM_HEAD_SIZES}")
        if self.speed_branch.sizes[1:] != [SPEED_WIDTH]:
            raise ModelError("speed branch must have 144 units")

    @property
    def nets(self) -> dict:
        return {"encoder": self.encoder, "speed_branch": self.speed_branch, "head": self.head}

    @property
    def n_features(self) -> int:
        return self.encoder.sizes[0]

    @property
    def zo_width(self) -> int:
        return self.encoder.sizes[-1]

    def train(self):
        for n in self.nets.values():
            n.train()
        return self

    def eval(self):
        for n in self.nets.values():
            n.eval()
        return self

    @property
    def training(self) -> bool:
        return self.head.training

    def freeze(self):
        for n in self.nets.values():
            n.freeze()

    def is_frozen(self) -> bool:
        return all(n.is_frozen() for n in self.nets.values())

    def param_hash(self) -> str:
        return params_hash(self.nets)

    def forward(self, features: np.ndarray, speed: np.ndarray):
        """Batch forward. Returns ``(action (B,), z_o, z_v, cache)``."""
        x = self.normalizer.features(np.atleast_2d(features))
        vin = self.normalizer.speed(speed)
        zo, c_enc = self.encoder.forward(x)
        zv, c_spd = self.speed_branch.forward(vin)
        out, c_head = self.head.forward(np.concatenate([zo, zv], axis=1))
        return out[:, 0], zo, zv, (c_enc, c_spd, c_head)

    def backward(self, cache, d_action: np.ndarray) -> list:
        c_enc, c_spd, c_head = cache
        g_head, g_in = self.head.backward(c_head, d_action.reshape(-1, 1))
        w = self.zo_width
        g_enc, _ = self.encoder.backward(c_enc, g_in[:, :w])
        g_spd, _ = self.speed_branch.backward(c_spd, g_in[:, w:])
        return g_enc + g_spd + g_head

    def predict(self, features: np.ndarray, speed: np.ndarray) -> np.ndarray:
        return self.forward(features, speed)[0]

    def save(self, path, meta: dict | None = None) -> str:
        m = {"kind": "bm", "normalizer": self.normalizer.to_dict()}
        m.update(meta or {})
        return save_checkpoint(path, self.nets, m)

    @classmethod
    def load(cls, path) -> "BaseModel":
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "bm":
            raise ModelError(f"{path} is not a base-model checkpoint")
        bm = cls.__new__(cls)
        bm.encoder, bm.speed_branch, bm.head = nets["encoder"], nets["speed_branch"], nets["head"]
        bm.normalizer = Normalizer.from_dict(meta["normalizer"])
        bm._check()
        return bm.eval()


def bm_infer(bm: BaseModel, obs: Observation, v: float):
    """Single-step inference: ``(action, z_o, z_v)``."""
    if bm.training:
        raise ModelError("bm_infer needs eval mode")
    a, zo, zv, _ = bm.forward(obs.features()[None, :], np.array([v]))
    a = float(a[0])
    if not math.isfinite(a):
        raise ModelError("base model produced a non-finite action")
    return a, zo[0], zv[0]


class TimedActionPredictor:
    """Three input branches (action, observation features, speed features)
    concatenated and shared by one 200/100/50/1 submodel per latency in
    ``delta_grid``."""

    def __init__(self, zo_width: int, zv_width: int = SPEED_WIDTH, delta_grid=DEFAULT_DELTA_GRID,
                 seed: int = 0, dropout: float = DROPOUT):
        grid = tuple(float(d) for d in delta_grid)
        if not grid or any(d <= 0 for d in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ModelError("delta grid must be positive and strictly increasing")
        self.delta_grid = grid
        wa, wo, wv = TAPM_BRANCH_WIDTHS
        self.in_action = MlpNet([1, wa], ["relu"], seed=seed + 10)
        self.in_zo = MlpNet([zo_width, wo], ["relu"], seed=seed + 11)
        self.in_zv = MlpNet([zv_width, wv], ["relu"], seed=seed + 12)
        acts = ["relu", "relu", "relu", "identity"]
        drop = [dropout, dropout, 0.0, 0.0]
        self.submodels = [MlpNet([wa + wo + wv, *TAPM_SUBMODEL_SIZES], acts, drop, seed=seed + 20 + j)
                          for j in range(len(grid))]
        self._check()

    def _check(self):
        widths = (self.in_action.sizes[-1], self.in_zo.sizes[-1], self.in_zv.sizes[-1])
        if widths != TAPM_BRANCH_WIDTHS:
            raise ModelError(f"branch widths {widths} != {TAPM_BRANCH_WIDTHS}")
        for sm in self.submodels:
            if tuple(sm.sizes[1:]) != TAPM_SUBMODEL_SIZES:
                raise ModelError(f"submodel sizes {sm.sizes[1:]} != {TAPM_SUBMODEL_SIZES}")
        if len(self.submodels) != len(self.delta_grid):
            raise ModelError("one submodel per latency in the grid")

    @property
    def nets(self) -> dict:
        d = {"in_action": self.in_action, "in_zo": self.in_zo, "in_zv": self.in_zv}
        d.update({f"sub{j}": sm for j, sm in enumerate(self.submodels)})
        return d

    @property
    def n(self) -> int:
        return len(self.delta_grid)

    def train(self):
        for n in self.nets.values():
            n.train()
        return self

    def eval(self):
        for n in self.nets.values():
            n.eval()
        return self

    @property
    def training(self) -> bool:
        return self.in_zo.training

    def forward(self, action: np.ndarray, zo: np.ndarray, zv: np.ndarray):
        """Batch forward. Returns ``(predictions (B, N), cache)``."""
        ha, ca = self.in_action.forward(np.asarray(action, dtype=float).reshape(-1, 1))
        ho, co = self.in_zo.forward(np.atleast_2d(zo))
        hv, cv = self.in_zv.forward(np.atleast_2d(zv))
        h = np.concatenate([ha, ho, hv], axis=1)
        outs, subcaches = [], []
        for sm in self.submodels:
            o, c = sm.forward(h)
            outs.append(o[:, 0])
            subcaches.append(c)
        return np.stack(outs, axis=1), (ca, co, cv, subcaches)

    def backward(self, cache, d_out: np.ndarray) -> list:
        ca, co, cv, subcaches = cache
        g_sub = []
        g_h = 0.0
        for j, (sm, c) in enumerate(zip(self.submodels, subcaches)):
            g, gin = sm.backward(c, d_out[:, j:j + 1])
            g_sub += g
            g_h = g_h + gin
        wa, wo, _ = TAPM_BRANCH_WIDTHS
        g_a, _ = self.in_action.backward(ca, g_h[:, :wa])
        g_o, _ = self.in_zo.backward(co, g_h[:, wa:wa + wo])
        g_v, _ = self.in_zv.backward(cv, g_h[:, wa + wo:])
        return g_a + g_o + g_v + g_sub

    def save(self, path, meta: dict | None = None) -> str:
        m = {"kind": "tapm", "delta_grid": list(self.delta_grid)}
        m.update(meta or {})
        return save_checkpoint(path, self.nets, m)

    @classmethod
    def load(cls, path) -> "TimedActionPredictor":
        nets, meta = load_checkpoint(path)
        if meta.get("kind") != "tapm":
            raise ModelError(f"{path} is not a predictor checkpoint")
        t = cls.__new__(cls)
        t.delta_grid = tuple(meta["delta_grid"])
        t.in_action, t.in_zo, t.in_zv = nets["in_action"], nets["in_zo"], nets["in_zv"]
        t.submodels = [nets[f"sub{j}"] for j in range(len(t.delta_grid))]
        t._check()
        return t.eval()


def tapm_infer(tapm: TimedActionPredictor, action: float, zo: np.ndarray, zv: np.ndarray) -> np.ndarray:
    if tapm.training:
        raise ModelError("tapm_infer needs eval mode")
    if zo.shape[-1] != tapm.in_zo.sizes[0] or zv.shape[-1] != tapm.in_zv.sizes[0]:
        raise ModelError("feature widths do not match the predictor")
    out, _ = tapm.forward(np.array([action]), zo[None, :], zv[None, :])
    return out[0]


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    lr: float = 0.001
    epochs: int = 50
    seed: int = 0
    flip_prob: float = 0.5
    feature_noise: float = 0.0  # std of additive Gaussian noise on normalized features
    refit_output: bool = True  # least-squares output layer on eval-mode activations


def _snapshot(nets: dict) -> dict:
    return {k: [p.copy() for p in n.params()] for k, n in nets.items()}


def _restore(nets: dict, snap: dict) -> None:
    for k, n in nets.items():
        for p, q in zip(n.params(), snap[k]):
            p[...] = q


class _SwapLastLayer:
    """Temporarily replace the final layer of each net with refitted values."""

    def __init__(self, nets, solutions):
        self.pairs = list(zip(nets, solutions))

    def __enter__(self):
        self.saved = []
        for net, (w, b) in self.pairs:
            last = net.layers[-1]
            self.saved.append((last.weights.copy(), last.biases.copy()))
            last.weights[...] = w
            last.biases[...] = b
        return self

    def __exit__(self, *exc):
        for (net, _), (w, b) in zip(self.pairs, self.saved):
            net.layers[-1].weights[...] = w
            net.layers[-1].biases[...] = b
        return False


def _chunks(n, size=4096):
    return [slice(i, min(n, i + size)) for i in range(0, n, size)]


def _bm_refit(bm: BaseModel, ds: ImitationDataset):
    feats = np.concatenate([ds.features, -ds.features])
    speed = np.concatenate([ds.speed, ds.speed])
    target = np.concatenate([ds.action, -ds.action])
    hidden = []
    for sl in _chunks(len(feats)):
        _, _, _, (_, _, (head_cache, _)) = bm.forward(feats[sl], speed[sl])
        hidden.append(head_cache[-1][0])
    w, b = refit_output_layer(bm.head, np.concatenate(hidden), target)
    return [(w, b)]


def _flip_mask(rng, n, p):
    return np.where(rng.random(n) < p, -1.0, 1.0)


def _noisy(features, bm: BaseModel, rng, sigma):
    if sigma <= 0:
        return features
    return features + sigma * bm.normalizer.feat_std * rng.standard_normal(features.shape)


def train_bm(train: ImitationDataset, val: ImitationDataset, cfg: TrainConfig = TrainConfig(),
             log=None, selector=None) -> tuple[BaseModel, list[dict]]:
    """Adam on per-sample MSE with random left/right flips; returns the
    best-validation model and the per-epoch history.

    By default the kept epoch is the one with the lowest validation MSE.
    ``selector(bm) -> float`` replaces that score (lower is better), e.g. a
    closed-loop driving check; its value is logged as ``select``.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("empty training or validation set")
    bm = BaseModel(train.features.shape[1], seed=cfg.seed)
    bm.normalizer = Normalizer.fit(train)
    opt = Adam(bm.nets.values(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 100])
    history = []
    best, best_val = None, math.inf
    for epoch in range(cfg.epochs):
        bm.train()
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            sign = _flip_mask(rng, len(idx), cfg.flip_prob)
            f = _noisy(train.features[idx] * sign[:, None], bm, rng, cfg.feature_noise)
            y = train.action[idx] * sign
            pred, _, _, cache = bm.forward(f, train.speed[idx])
            loss, g = mse(pred, y)
            if not math.isfinite(loss):
                raise TrainingError(f"base model diverged in epoch {epoch}")
            opt.step(bm.backward(cache, g))
            total += loss * len(idx)
        bm.eval()
        if not math.isfinite(total):
            raise TrainingError(f"base model diverged in epoch {epoch}")
        refit = _bm_refit(bm, train) if cfg.refit_output else []
        with _SwapLastLayer([bm.head] if refit else [], refit):
            val_mse = float(np.mean((bm.predict(val.features, val.speed) - val.action) ** 2))
            row = {"epoch": epoch, "train_mse": total / len(train), "val_mse": val_mse}
            if not math.isfinite(val_mse):
                raise TrainingError(f"base model diverged in epoch {epoch}")
            score = val_mse
            if selector is not None:
                score = row["select"] = float(selector(bm))
            if score < best_val:
                best_val, best = score, _snapshot(bm.nets)
        history.append(row)
        if log:
            log(row)
    _restore(bm.nets, best)
    return bm.eval(), history


def bm_outputs(bm: BaseModel, features: np.ndarray, speed: np.ndarray, chunk: int = 4096):
    """Eval-mode ``(action, z_o, z_v)`` for a whole array of inputs."""
    outs = [bm.forward(features[i:i + chunk], speed[i:i + chunk])[:3] for i in range(0, len(features), chunk)]
    return tuple(np.concatenate([o[k] for o in outs]) for k in range(3))


def _tapm_refit(tapm: TimedActionPredictor, plain, mirror, future: np.ndarray):
    hidden = [[] for _ in tapm.submodels]
    for inputs in (plain, mirror):
        for sl in _chunks(len(inputs[0])):
            _, (_, _, _, subcaches) = tapm.forward(inputs[0][sl], inputs[1][sl], inputs[2][sl])
            for j, (cache, _) in enumerate(subcaches):
                hidden[j].append(cache[-1][0])
    target = np.concatenate([future, -future])
    return [refit_output_layer(sm, np.concatenate(h), target[:, j])
            for j, (sm, h) in enumerate(zip(tapm.submodels, hidden))]


def train_tapm(train: ImitationDataset, val: ImitationDataset, bm: BaseModel,
               cfg: TrainConfig = TrainConfig(), log=None) -> tuple[TimedActionPredictor, list[dict]]:
    """Fit the predictor on future-action labels through a frozen base model.

    The loss is the sum over submodels of the batch-mean squared error.
    """
    if not bm.is_frozen():
        raise FrozenError("the base model must be frozen before training the predictor")
    if not train.is_tapm or not val.is_tapm:
        raise TrainingError("datasets need future-action labels")
    bm_hash = bm.param_hash()
    bm.eval()
    tapm = TimedActionPredictor(bm.zo_width, SPEED_WIDTH, train.delta_grid, seed=cfg.seed)
    opt = Adam(tapm.nets.values(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 200])
    # the base model is fixed, so its outputs for plain and mirrored inputs are computed once
    plain = bm_outputs(bm, train.features, train.speed)
    mirror = bm_outputs(bm, -train.features, train.speed)
    val_in = bm_outputs(bm, val.features, val.speed)
    history = []
    best, best_val = None, math.inf
    for epoch in range(cfg.epochs):
        tapm.train()
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            flip = rng.random(len(idx)) < cfg.flip_prob
            a = np.where(flip, mirror[0][idx], plain[0][idx])
            zo = np.where(flip[:, None], mirror[1][idx], plain[1][idx])
            zv = np.where(flip[:, None], mirror[2][idx], plain[2][idx])
            y = train.future[idx] * np.where(flip, -1.0, 1.0)[:, None]
            pred, cache = tapm.forward(a, zo, zv)
            diff = pred - y
            loss = float(np.sum(np.mean(diff ** 2, axis=0)))
            if not math.isfinite(loss):
                raise TrainingError(f"predictor diverged in epoch {epoch}")
            opt.step(tapm.backward(cache, 2.0 * diff / len(idx)))
            total += loss * len(idx)
        tapm.eval()
        if not math.isfinite(total):
            raise TrainingError(f"predictor diverged in epoch {epoch}")
        refit = _tapm_refit(tapm, plain, mirror, train.future) if cfg.refit_output else []
        with _SwapLastLayer(tapm.submodels if refit else [], refit):
            pred, _ = tapm.forward(*val_in)
            per = np.mean((pred - val.future) ** 2, axis=0)
            row = {"epoch": epoch, "train_mse": total / len(train), "val_mse": float(per.sum()),
                   **{f"val_mse_{d:.2f}": float(v) for d, v in zip(tapm.delta_grid, per)}}
            if not math.isfinite(row["val_mse"]):
                raise TrainingError(f"predictor diverged in epoch {epoch}")
            if row["val_mse"] < best_val:
                best_val, best = row["val_mse"], _snapshot(tapm.nets)
        history.append(row)
        if log:
            log(row)
    _restore(tapm.nets, best)
    if bm.param_hash() != bm_hash:
        raise TrainingError("base model parameters changed while training the predictor")
    return tapm.eval(), history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
