"""Toy differentiable gaze estimators, SGD training and the GZML file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, TrainingDivergenceError
from .geometry import pitchyaw_array_to_vecs, tensor_vec_to_pitchyaw

PIXEL_SCALE = 1.0 / 255.0
PIXEL_CENTER = 0.5
LOSS_KINDS = ("mse_pitchyaw", "angular")


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _normalize(raw: Tensor) -> Tensor:
    return raw / ad.norm(raw, axis=1, keepdims=True)


def _conv_block(x: Tensor, w: Tensor, b: Tensor, pool: int) -> Tensor:
    return ad.avg_pool2d(ad.relu(ad.conv2d(x, w, b)), pool)


class GazeModel:
    """A gaze estimator with named parameters.

    ``forward`` takes a mapping from input name to a (B, H, W) pixel batch in
    [0, 255] and returns one (B, 3) tensor of unit vectors per output head,
    ordered coarse-to-fine. The last head is the model's gaze estimate.
    """

    kind = "abstract"
    input_spec: list = []
    output_spec: list = []

    def __init__(self, params: dict):
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
                       for k, v in params.items()}

    def _check_inputs(self, inputs: dict) -> dict:
        out = {}
        batch = None
        for name, shape in self.input_spec:
            if name not in inputs:
                raise DimensionError(f"{self.kind}: missing input '{name}'")
            x = ad.as_tensor(inputs[name])
            if x.shape[1:] != tuple(shape):
                raise DimensionError(
                    f"{self.kind}: input '{name}' has shape {x.shape}, expected (B, {shape[0]}, {shape[1]})"
                )
            if batch is not None and x.shape[0] != batch:
                raise DimensionError(f"{self.kind}: inputs disagree on batch size")
            batch = x.shape[0]
            out[name] = x
        return out

    def forward(self, inputs: dict) -> list:
        raise NotImplementedError

    __call__ = forward

    def predict(self, inputs: dict) -> np.ndarray:
        """Final-head unit vectors as a plain array (no gradient tape)."""
        plain = {k: ad.as_tensor(v).detach() for k, v in inputs.items()}
        frozen = self.frozen()
        return frozen.forward(plain)[-1].data

    def frozen(self) -> "GazeModel":
        """Same weights, no parameter gradients recorded."""
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data) for k, v in self.params.items()}
        return clone

    def copy(self) -> "GazeModel":
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return clone

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def inputs_from(self, arrays: dict) -> dict:
        return {name: arrays[name] for name, _ in self.input_spec}


class SingleInputCNN(GazeModel):
    """Face image -> two conv layers (8, 16 channels) -> two dense layers -> 3-vector."""

    kind = "single_input_cnn"
    input_spec = [("face", (48, 48))]
    output_spec = ["gaze"]

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 32) -> "SingleInputCNN":
        rng = np.random.default_rng(seed)
        return cls({
            "conv1.w": _he(rng, (8, 1, 3, 3), 9),
            "conv1.b": np.zeros(8),
            "conv2.w": _he(rng, (16, 8, 3, 3), 72),
            "conv2.b": np.zeros(16),
            "fc1.w": _he(rng, (784, hidden), 784),
            "fc1.b": np.zeros(hidden),
            "fc2.w": rng.normal(0.0, 0.01, size=(hidden, 3)),
            "fc2.b": np.array([0.0, 0.0, -1.0]),
        })

    def forward(self, inputs: dict) -> list:
        x = self._check_inputs(inputs)["face"]
        p = self.params
        h = (x * PIXEL_SCALE - PIXEL_CENTER).reshape(x.shape[0], 1, 48, 48)
        h = _conv_block(h, p["conv1.w"], p["conv1.b"], 2)  # (B, 8, 23, 23)
        h = _conv_block(h, p["conv2.w"], p["conv2.b"], 3)  # (B, 16, 7, 7)
        h = h.reshape(x.shape[0], -1)
        h = ad.relu(h @ p["fc1.w"] + p["fc1.b"])
        return [_normalize(h @ p["fc2.w"] + p["fc2.b"])]


class MultiInputMultiHead(GazeModel):
    """Face plus both eye crops; a coarse head sees the face only, a fine head sees all."""

    kind = "multi_input_multi_head"
    input_spec = [("face", (48, 48)), ("left_eye", (24, 24)), ("right_eye", (24, 24))]
    output_spec = ["coarse", "fine"]

    @classmethod
    def init(cls, seed: int = 0) -> "MultiInputMultiHead":
        rng = np.random.default_rng(seed)
        return cls({
            "face1.w": _he(rng, (4, 1, 3, 3), 9),
            "face1.b": np.zeros(4),
            "face2.w": _he(rng, (8, 4, 3, 3), 36),
            "face2.b": np.zeros(8),
            "eye1.w": _he(rng, (4, 1, 3, 3), 9),
            "eye1.b": np.zeros(4),
            "eye2.w": _he(rng, (8, 4, 3, 3), 36),
            "eye2.b": np.zeros(8),
            "coarse1.w": _he(rng, (392, 16), 392),
            "coarse1.b": np.zeros(16),
            "coarse2.w": rng.normal(0.0, 0.01, size=(16, 3)),
            "coarse2.b": np.array([0.0, 0.0, -1.0]),
            "fine1.w": _he(rng, (536, 32), 536),
            "fine1.b": np.zeros(32),
            "fine2.w": rng.normal(0.0, 0.01, size=(32, 3)),
            "fine2.b": np.array([0.0, 0.0, -1.0]),
        })

    def _eye(self, e: Tensor) -> Tensor:
        p = self.params
        h = (e * PIXEL_SCALE - PIXEL_CENTER).reshape(e.shape[0], 1, 24, 24)
        h = _conv_block(h, p["eye1.w"], p["eye1.b"], 2)  # (B, 4, 11, 11)
        h = _conv_block(h, p["eye2.w"], p["eye2.b"], 3)  # (B, 8, 3, 3)
        return h.reshape(e.shape[0], -1)

    def forward(self, inputs: dict) -> list:
        x = self._check_inputs(inputs)
        p = self.params
        f = x["face"]
        B = f.shape[0]
        h = (f * PIXEL_SCALE - PIXEL_CENTER).reshape(B, 1, 48, 48)
        h = _conv_block(h, p["face1.w"], p["face1.b"], 2)  # (B, 4, 23, 23)
        h = _conv_block(h, p["face2.w"], p["face2.b"], 3)  # (B, 8, 7, 7)
        face_feat = h.reshape(B, -1)
        coarse = ad.relu(face_feat @ p["coarse1.w"] + p["coarse1.b"])
        coarse = _normalize(coarse @ p["coarse2.w"] + p["coarse2.b"])
        feat = ad.concat([face_feat, self._eye(x["left_eye"]), self._eye(x["right_eye"])], axis=1)
        fine = ad.relu(feat @ p["fine1.w"] + p["fine1.b"])
        fine = _normalize(fine @ p["fine2.w"] + p["fine2.b"])
        return [coarse, fine]


class PixelLinearModel(GazeModel):
    """Affine map from a handful of pixels to a gaze vector: ``normalize(W x/255 + b)``.

    Small enough that attacks on it can be checked by exhaustive search.
    """

    kind = "pixel_linear"
    output_spec = ["gaze"]

    def __init__(self, params: dict):
        super().__init__(params)
        n = self.params["w"].shape[0]
        self.input_spec = [("face", (1, n))]

    @classmethod
    def init(cls, weight, bias) -> "PixelLinearModel":
        return cls({"w": np.asarray(weight, dtype=np.float64), "b": np.asarray(bias, dtype=np.float64)})

    def forward(self, inputs: dict) -> list:
        x = self._check_inputs(inputs)["face"]
        h = x.reshape(x.shape[0], -1) * PIXEL_SCALE
        return [_normalize(h @ self.params["w"] + self.params["b"])]


MODEL_KINDS = {cls.kind: cls for cls in (SingleInputCNN, MultiInputMultiHead, PixelLinearModel)}


def build_model(kind: str, seed: int = 0) -> GazeModel:
    if kind == SingleInputCNN.kind:
        return SingleInputCNN.init(seed)
    if kind == MultiInputMultiHead.kind:
        return MultiInputMultiHead.init(seed)
    raise ContractError(f"unknown model kind '{kind}'")


# -- training ----------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    loss_kind: str = "mse_pitchyaw"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("TrainConfig: epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("TrainConfig: batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("TrainConfig: learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("TrainConfig: momentum must be in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"TrainConfig: loss_kind must be one of {LOSS_KINDS}")


@dataclass
class TrainResult:
    model: GazeModel
    loss_curve: list = field(default_factory=list)
    final_error_deg: float = float("nan")


def model_loss(heads: list, target: "Tensor | list", loss_kind: str) -> Tensor:
    """Mean training loss summed over heads.

    ``target`` is either a (B, 2) pitch/yaw label tensor, or a list of (B, 3)
    unit-vector tensors with one entry per head.
    """
    from .losses import angular_error_batch

    total = None
    for i, head in enumerate(heads):
        tgt = target[i] if isinstance(target, list) else target
        if loss_kind == "mse_pitchyaw":
            tgt_py = tensor_vec_to_pitchyaw(tgt) if tgt.shape[-1] == 3 else tgt
            term = ad.mean(ad.square(tensor_vec_to_pitchyaw(head) - tgt_py))
        elif loss_kind == "angular":
            tgt_vec = tgt if tgt.shape[-1] == 3 else Tensor(pitchyaw_array_to_vecs(tgt.data))
            term = ad.mean(angular_error_batch(head, tgt_vec))
        else:
            raise ContractError(f"unknown loss kind '{loss_kind}'")
        total = term if total is None else total + term
    return total


class SGD:
    """Stochastic gradient descent with heavy-ball momentum (0 gives plain SGD)."""

    def __init__(self, model: GazeModel, lr: float, momentum: float = 0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self.steps = 0

    def step(self) -> None:
        for k, p in self.model.params.items():
            v = self.momentum * self.velocity[k] + p.grad
            self.velocity[k] = v
            p.data = p.data - self.lr * v
            p.grad = np.zeros_like(p.data)
        self.steps += 1

    def finite(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.model.params.values())


def mean_angular_error(model: GazeModel, dataset, batch_size: int = 256) -> float:
    """Mean angular error (degrees) of the final head against ground truth."""
    arrays = dataset.arrays()
    n = len(arrays["pitchyaw"])
    if n == 0:
        return float("nan")
    errs = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        pred = model.predict({k: v[sl] for k, v in model.inputs_from(arrays).items()})
        gt = pitchyaw_array_to_vecs(arrays["pitchyaw"][sl])
        cos = np.clip(np.sum(pred * gt, axis=1), -1.0, 1.0)
        errs.append(np.degrees(np.arccos(cos)))
    return float(np.mean(np.concatenate(errs)))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: GazeModel, dataset, cfg: TrainConfig) -> TrainResult:
    if len(dataset) == 0:
        raise ContractError("train: dataset is empty")
    model = model.copy()
    arrays = dataset.arrays()
    inputs = model.inputs_from(arrays)
    labels = arrays["pitchyaw"]
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model, cfg.learning_rate, cfg.momentum)
    curve = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in epoch_batches(len(labels), cfg.batch_size, rng):
            heads = model.forward({k: Tensor(v[idx]) for k, v in inputs.items()})
            loss = model_loss(heads, Tensor(labels[idx]), cfg.loss_kind)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(epoch)
            loss.backward()
            opt.step()
            if not opt.finite():
                raise TrainingDivergenceError(epoch)
            total += float(loss.data) * len(idx)
            count += len(idx)
        curve.append(total / count)
    return TrainResult(model, curve, mean_angular_error(model, dataset))


# -- GZML file format ----------------------------------------------------------
# magic(4) version(u32) kind_len(u32) kind n_params(u32), then per parameter:
# name_len(u32) name rank(u32) dims(u32 x rank) values(f64 little-endian)
MAGIC = b"GZML"
VERSION = 1


def dumps_model(model: GazeModel) -> bytes:
    kind = model.kind.encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(kind)), kind, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_model(buf: bytes) -> GazeModel:
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise FormatError("model: truncated file")
        chunk = buf[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("model: bad magic")
    version, klen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"model: unsupported version {version}")
    kind = take(klen).decode()
    if kind not in MODEL_KINDS:
        raise FormatError(f"model: unknown kind '{kind}'")
    (n_params,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if off != len(buf):
        raise FormatError("model: trailing bytes after parameters")
    return MODEL_KINDS[kind](params)


def save_model(model: GazeModel, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> GazeModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return loads_model(path.read_bytes())
