"""Embedding table, CNN sequence encoder, projector and task heads.

A :class:`ModelBundle` keeps every weight in one flat ``{name: Tensor}``
mapping. The component is the name prefix before the first dot
(``embedding``, ``encoder``, ``projector``, ``classifier``, ``context``);
freezing works per component.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError
from .tensor import Tensor

COMPONENTS = ("embedding", "encoder", "projector", "classifier", "context")
ENCODER_COMPONENTS = ("embedding", "encoder")


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    seq_len: int = 16
    embedding_dim: int = 16
    conv_channels: tuple[int, ...] = (32, 32)
    kernel_size: int = 3
    pool_size: int = 3
    projector_dims: tuple[int, ...] = (256, 256)
    classifier_hidden: int = 20
    context_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "projector_dims", tuple(self.projector_dims))
        if self.n_items < 1:
            raise ContractError("n_items must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ContractError("kernel_size must be odd")
        if self.final_length < 1:
            raise ContractError(
                f"seq_len {self.seq_len} collapses to zero after {len(self.conv_channels)} pools"
            )

    @property
    def final_length(self) -> int:
        n = self.seq_len
        for _ in self.conv_channels:
            n //= self.pool_size
        return n

    @property
    def rep_dim(self) -> int:
        return self.conv_channels[-1] * self.final_length

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["projector_dims"] = list(self.projector_dims)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        return cls(**obj)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelBundle:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def component(self, name: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] == name}

    def has(self, name: str) -> bool:
        return any(k.split(".", 1)[0] == name for k in self.params)

    def freeze(self, *names: str) -> None:
        self.frozen.update(names)

    def unfreeze(self, *names: str) -> None:
        self.frozen.difference_update(names)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] not in self.frozen}

    def drop(self, name: str) -> None:
        for k in list(self.component(name)):
            del self.params[k]
        self.frozen.discard(name)

    def copy(self) -> ModelBundle:
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return ModelBundle(self.config, params, set(self.frozen))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding.weight"]

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    # -- initialisation ---------------------------------------------------

    def init_embedding(self, rng) -> None:
        c = self.config
        self._add("embedding.weight", rng.normal(0.0, 0.01, size=(c.n_items + 1, c.embedding_dim)))

    def init_encoder(self, rng) -> None:
        c = self.config
        c_in, w = c.embedding_dim, c.kernel_size
        for i, c_out in enumerate(c.conv_channels):
            self._add(f"encoder.conv{i}.kernels", glorot_uniform((c_out, c_in, w), c_in * w, c_out * w, rng))
            self._add(f"encoder.conv{i}.bias", np.zeros(c_out))
            c_in = c_out

    def _init_mlp(self, prefix: str, dims: list[int], rng) -> None:
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self._add(f"{prefix}.{i}.weight", glorot_uniform((a, b), a, b, rng))
            self._add(f"{prefix}.{i}.bias", np.zeros(b))

    def init_projector(self, rng) -> None:
        self._init_mlp("projector", [self.config.rep_dim, *self.config.projector_dims], rng)

    def init_classifier(self, n_classes: int, rng) -> None:
        self.drop("classifier")
        c = self.config
        self._init_mlp("classifier", [c.rep_dim, c.classifier_hidden, n_classes], rng)

    def init_context(self, rng) -> None:
        self.drop("context")
        c = self.config
        self._init_mlp("context", [c.rep_dim, c.context_hidden, c.embedding_dim], rng)


def _component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), COMPONENTS.index(component)])


def init_parameters(
    config: ModelConfig,
    seed: int,
    components=("embedding", "encoder", "projector"),
    n_classes: int | None = None,
) -> ModelBundle:
    """Fresh weights: Glorot-uniform kernels, zero biases, N(0, 0.01^2) embeddings.

    Each component draws from its own seeded stream, so adding a head does
    not perturb the encoder initialisation for the same seed.
    """
    bundle = ModelBundle(config)
    for comp in components:
        rng = _component_rng(seed, comp)
        if comp == "embedding":
            bundle.init_embedding(rng)
        elif comp == "encoder":
            bundle.init_encoder(rng)
        elif comp == "projector":
            bundle.init_projector(rng)
        elif comp == "classifier":
            if n_classes is None:
                raise ContractError("classifier needs n_classes")
            bundle.init_classifier(n_classes, rng)
        elif comp == "context":
            bundle.init_context(rng)
        else:
            raise ContractError(f"unknown component {comp!r}")
    return bundle


def add_head(bundle: ModelBundle, head: str, seed: int, n_classes: int | None = None) -> None:
    rng = _component_rng(seed, head)
    if head == "classifier":
        bundle.init_classifier(n_classes, rng)
    elif head == "context":
        bundle.init_context(rng)
    else:
        raise ContractError(f"unknown head {head!r}")


# ---------------------------------------------------------------------------
# forward passes


def _mlp(x: Tensor, bundle: ModelBundle, prefix: str) -> Tensor:
    layers = sorted({int(k.split(".")[1]) for k in bundle.component(prefix)})
    if not layers:
        raise ContractError(f"bundle has no {prefix} weights")
    p = bundle.params
    for n, i in enumerate(layers):
        w = p[f"{prefix}.{i}.weight"]
        if x.shape[1] != w.shape[0]:
            raise DimensionError(f"{prefix}.{i}: input dim {x.shape[1]} != {w.shape[0]}")
        x = T.linear(x, w, p[f"{prefix}.{i}.bias"])
        if n < len(layers) - 1:
            x = T.relu(x)
    return x


def encode(items, bundle: ModelBundle) -> Tensor:
    """Sequence representations (b, rep_dim) for a (b, seq_len) index batch."""
    items = np.asarray(items)
    c = bundle.config
    if items.ndim != 2 or items.shape[1] != c.seq_len:
        raise DimensionError(f"expected (b, {c.seq_len}) item batch, got {items.shape}")
    x = T.transpose(T.embedding(bundle.embedding, items), (0, 2, 1))
    p = bundle.params
    for i in range(len(c.conv_channels)):
        x = T.conv1d(x, p[f"encoder.conv{i}.kernels"], p[f"encoder.conv{i}.bias"])
        x = T.maxpool1d(T.relu(x), c.pool_size)
    return T.reshape(x, (items.shape[0], c.rep_dim))


def project(reps: Tensor, bundle: ModelBundle) -> Tensor:
    return _mlp(reps, bundle, "projector")


def classify(reps: Tensor, bundle: ModelBundle) -> Tensor:
    return _mlp(reps, bundle, "classifier")


def context_tower(reps: Tensor, bundle: ModelBundle) -> Tensor:
    """Map representations into item-embedding space (no final activation)."""
    return _mlp(reps, bundle, "context")


def encode_numpy(items, bundle: ModelBundle, batch_size: int = 4096) -> np.ndarray:
    """Tape-free batched :func:`encode` for evaluation."""
    items = np.asarray(items)
    out = np.empty((len(items), bundle.config.rep_dim))
    for lo in range(0, len(items), batch_size):
        out[lo : lo + batch_size] = encode(items[lo : lo + batch_size], bundle).data
    return out


def _unit_rows(x: Tensor) -> Tensor:
    return T.transpose(T.l2_normalize_columns(T.transpose(x)))


def score_items(context_out, item_embs, metric: str = "cosine") -> Tensor:
    """Pairwise similarity (b, n) between context vectors and item vectors."""
    a = context_out if isinstance(context_out, Tensor) else Tensor(context_out)
    b = item_embs if isinstance(item_embs, Tensor) else Tensor(item_embs)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"score_items: incompatible shapes {a.shape} and {b.shape}")
    if metric == "cosine":
        a, b = _unit_rows(a), _unit_rows(b)
    elif metric != "dot":
        raise ContractError(f"unknown metric {metric!r}")
    return T.matmul(a, T.transpose(b))


# ---------------------------------------------------------------------------
# checkpoints

_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> None:
    """Write named tensors plus a JSON config echo into an ``.npz`` archive.

    Entry timestamps are pinned so identical weights give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"model": bundle.config.to_json(), "frozen": sorted(bundle.frozen), "extra": extra or {}}
    arrays = {k: v.data for k, v in sorted(bundle.params.items())}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_FIXED_TIME), buf.getvalue())


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        params = {
            k: Tensor(npz[k], requires_grad=True, name=k) for k in npz.files if k != "__meta__"
        }
    bundle = ModelBundle(ModelConfig.from_json(meta["model"]), params, set(meta["frozen"]))
    return bundle, meta["extra"]
