"""Three-branch temporal pyramid encoder and its prediction heads.

Branches (recent past, short term, long term) are causal dilated TCNs with
different receptive fields. Their per-frame outputs are concatenated into one
behavior embedding, which feeds the future-action head ``g`` and the hidden
head ``h``. The short- and long-term embeddings also feed their own
bootstrap predictors ``q_short`` and ``q_long``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mbl import nn
from mbl.nn import autodiff as ad
from mbl.nn.autodiff import Tensor
from mbl.nn.layers import ConvLayerSpec, DenseLayerSpec, Params, mlp_specs, receptive_field

BRANCHES = ("recent_past", "short_term", "long_term")
BOOTSTRAP_BRANCHES = {"short": "short_term", "long": "long_term"}
HIDDEN_TASKS = ("none", "features", "pair_distance")

# Documented (kernel, dilation) stacks realising the default receptive fields.
DEFAULT_DILATIONS = {
    "recent_past": (1, 1),  # RF 3
    "short_term": (1, 2, 4, 8, 14),  # RF 30
    "long_term": (1, 2, 4, 8, 16, 32, 64, 125),  # RF 253
}
DEFAULT_DIMS = {"recent_past": 16, "short_term": 32, "long_term": 16}
DEFAULT_RF = {"recent_past": 3, "short_term": 30, "long_term": 253}


@dataclass
class EncoderSpec:
    name: str
    layers: list[ConvLayerSpec]
    embedding_dim: int
    target_rf: int | None = None

    def __post_init__(self):
        if self.name not in BRANCHES:
            raise ValueError(f"unknown encoder branch {self.name!r}")
        if not self.layers:
            raise ValueError(f"encoder {self.name!r} has no layers")
        if self.layers[-1].out_channels != self.embedding_dim:
            raise ValueError(f"encoder {self.name!r}: last layer width != embedding_dim")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError(f"encoder {self.name!r}: layer widths do not chain")
        if self.target_rf is not None and self.receptive_field != self.target_rf:
            raise ValueError(
                f"encoder {self.name!r} has receptive field {self.receptive_field}, expected {self.target_rf}"
            )

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.layers)

    @classmethod
    def from_dilations(
        cls,
        name: str,
        input_dim: int,
        embedding_dim: int,
        dilations: Sequence[int],
        kernel_size: int = 2,
        hidden_channels: int | None = None,
        target_rf: int | None = None,
    ) -> "EncoderSpec":
        """ReLU between layers, linear output layer."""
        width = hidden_channels or embedding_dim
        layers = []
        for i, d in enumerate(dilations):
            last = i == len(dilations) - 1
            layers.append(
                ConvLayerSpec(
                    input_dim if i == 0 else width,
                    embedding_dim if last else width,
                    kernel_size,
                    int(d),
                    "linear" if last else "relu",
                )
            )
        return cls(name, layers, embedding_dim, target_rf)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [layer.to_dict() for layer in self.layers],
            "embedding_dim": self.embedding_dim,
            "target_rf": self.target_rf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(d["name"], [ConvLayerSpec(**layer) for layer in d["layers"]], int(d["embedding_dim"]), d.get("target_rf"))


def build_default_specs(input_dim: int, hidden_channels: dict[str, int] | None = None) -> list[EncoderSpec]:
    """Encoders with receptive fields 3 / 30 / 253 and widths 16 / 32 / 16."""
    hidden_channels = hidden_channels or {}
    specs = []
    for name in BRANCHES:
        dil = DEFAULT_DILATIONS[name]
        if receptive_field([ConvLayerSpec(1, 1, 2, d) for d in dil]) != DEFAULT_RF[name]:
            raise ValueError(f"dilation template for {name} cannot reach RF {DEFAULT_RF[name]}")
        specs.append(
            EncoderSpec.from_dilations(
                name, input_dim, DEFAULT_DIMS[name], dil,
                hidden_channels=hidden_channels.get(name), target_rf=DEFAULT_RF[name],
            )
        )
    return specs


@dataclass
class BamsConfig:
    input_dim: int
    num_targets: int = 6
    horizon: int = 15
    hidden_task: str = "none"
    num_hidden: int = 0
    encoders: list[EncoderSpec] = field(default_factory=list)
    future_hidden: tuple[int, ...] = (128, 128)
    hidden_head_hidden: tuple[int, ...] = (128, 128)
    # None -> one hidden layer as wide as the branch
    bootstrap_hidden: tuple[int, ...] | None = None
    delta: int = 5
    alpha: float = 0.1

    def __post_init__(self):
        if not self.encoders:
            self.encoders = build_default_specs(self.input_dim)
        names = [e.name for e in self.encoders]
        if sorted(names) != sorted(BRANCHES):
            raise ValueError(f"need exactly one encoder per branch {BRANCHES}, got {names}")
        self.encoders = sorted(self.encoders, key=lambda e: BRANCHES.index(e.name))
        for enc in self.encoders:
            if enc.layers[0].in_channels != self.input_dim:
                raise ValueError(f"encoder {enc.name!r} expects {enc.layers[0].in_channels} inputs, model has {self.input_dim}")
        if self.hidden_task not in HIDDEN_TASKS:
            raise ValueError(f"hidden_task must be one of {HIDDEN_TASKS}")
        if self.hidden_task == "features" and self.num_hidden < 1:
            raise ValueError("hidden_task 'features' needs num_hidden >= 1")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if self.horizon < 1 or self.num_targets < 1:
            raise ValueError("horizon and num_targets must be positive")
        self.future_hidden = tuple(self.future_hidden)
        self.hidden_head_hidden = tuple(self.hidden_head_hidden)
        if self.bootstrap_hidden is not None:
            self.bootstrap_hidden = tuple(self.bootstrap_hidden)

    def encoder(self, name: str) -> EncoderSpec:
        return self.encoders[BRANCHES.index(name)]

    @property
    def branch_slices(self) -> dict[str, slice]:
        out = {}
        lo = 0
        for enc in self.encoders:
            out[enc.name] = slice(lo, lo + enc.embedding_dim)
            lo += enc.embedding_dim
        return out

    @property
    def embedding_dim(self) -> int:
        return sum(e.embedding_dim for e in self.encoders)

    @property
    def max_receptive_field(self) -> int:
        return max(e.receptive_field for e in self.encoders)

    def head_specs(self) -> dict[str, list[DenseLayerSpec]]:
        z = self.embedding_dim
        heads = {"g": mlp_specs(z, self.future_hidden, self.horizon * self.num_targets)}
        if self.hidden_task == "features":
            heads["h"] = mlp_specs(z, self.hidden_head_hidden, self.num_hidden)
        elif self.hidden_task == "pair_distance":
            heads["h"] = mlp_specs(2 * z, self.hidden_head_hidden, 1)
        for tag, branch in BOOTSTRAP_BRANCHES.items():
            dim = self.encoder(branch).embedding_dim
            hidden = self.bootstrap_hidden if self.bootstrap_hidden is not None else (dim,)
            heads[f"q_{tag}"] = mlp_specs(dim, hidden, dim)
        return heads

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_targets": self.num_targets,
            "horizon": self.horizon,
            "hidden_task": self.hidden_task,
            "num_hidden": self.num_hidden,
            "encoders": [e.to_dict() for e in self.encoders],
            "future_hidden": list(self.future_hidden),
            "hidden_head_hidden": list(self.hidden_head_hidden),
            "bootstrap_hidden": None if self.bootstrap_hidden is None else list(self.bootstrap_hidden),
            "delta": self.delta,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BamsConfig":
        d = dict(d)
        d["encoders"] = [EncoderSpec.from_dict(e) for e in d.get("encoders", [])]
        return cls(**d)


@dataclass
class EmbeddingSet:
    """Per-frame branch embeddings and their concatenation (numpy, no graph)."""

    z_rp: np.ndarray
    z_s: np.ndarray
    z_l: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.z_rp, self.z_s, self.z_l], axis=-1)

    @classmethod
    def split(cls, z: np.ndarray, slices: dict[str, slice]) -> "EmbeddingSet":
        return cls(z[..., slices["recent_past"]], z[..., slices["short_term"]], z[..., slices["long_term"]])


class BamsModel:
    """Parameters plus forward functions for encoders and heads."""

    def __init__(self, config: BamsConfig, params: Params | None = None, seed: int = 0, dtype=np.float64):
        self.config = config
        self.heads = config.head_specs()
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed), dtype)

    def _init_params(self, rng: np.random.Generator, dtype) -> Params:
        params: Params = {}
        for enc in self.config.encoders:
            for i, spec in enumerate(enc.layers):
                params.update(nn.init_conv(rng, spec, f"enc.{enc.name}.{i}", dtype))
        for head, specs in self.heads.items():
            for i, spec in enumerate(specs):
                params.update(nn.init_dense(rng, spec, f"{head}.{i}", dtype))
        return params

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ---------------------------------------------------------------- encoders

    def encode_branch(self, x, name: str) -> Tensor:
        enc = self.config.encoder(name)
        return nn.conv_stack_forward(ad.as_tensor(x), enc.layers, self.params, f"enc.{name}")

    def encode(self, x) -> dict[str, Tensor]:
        """Branch embeddings for input (..., T, D); ``x`` may be a Tensor."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"input has {x.shape[-1]} channels, model expects {self.config.input_dim}")
        return {name: self.encode_branch(x, name) for name in BRANCHES}

    def concat(self, branches: dict[str, Tensor]) -> Tensor:
        return ad.concat([branches[name] for name in BRANCHES], axis=-1)

    def embed(self, features: np.ndarray) -> EmbeddingSet:
        """Per-frame embeddings of one (T, D) sequence, without recording a graph."""
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.config.input_dim:
            raise ValueError(f"embed expects (T, {self.config.input_dim}) features, got {features.shape}")
        with no_grad(self):
            out = self.encode(features[None])
        return EmbeddingSet(*(out[name].value[0] for name in BRANCHES))

    # ---------------------------------------------------------------- heads

    def predict_future(self, z) -> Tensor:
        """g: (..., 64) -> (..., L, n_targets)."""
        out = nn.mlp_forward(z, self.heads["g"], self.params, "g")
        return ad.reshape(out, out.shape[:-1] + (self.config.horizon, self.config.num_targets))

    def predict_hidden(self, z) -> Tensor:
        if self.config.hidden_task != "features":
            raise ValueError("model was not configured with a hidden-feature head")
        return nn.mlp_forward(z, self.heads["h"], self.params, "h")

    def predict_pair_distance(self, z_i, z_j) -> Tensor:
        """Symmetric, nonnegative distance estimate from two agents' embeddings."""
        if self.config.hidden_task != "pair_distance":
            raise ValueError("model was not configured with a pair-distance head")
        z_i, z_j = ad.as_tensor(z_i), ad.as_tensor(z_j)
        sym = ad.concat([ad.add(z_i, z_j), ad.absolute(ad.sub(z_i, z_j))], axis=-1)
        out = nn.mlp_forward(sym, self.heads["h"], self.params, "h")
        return ad.softplus(ad.reshape(out, out.shape[:-1]))

    def bootstrap_predict(self, branch: str, z_branch) -> Tensor:
        if branch not in BOOTSTRAP_BRANCHES:
            raise ValueError(f"no bootstrap predictor for branch {branch!r}; use 'short' or 'long'")
        return nn.mlp_forward(z_branch, self.heads[f"q_{branch}"], self.params, f"q_{branch}")

    # ---------------------------------------------------------------- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{k}": v.value for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            key = f"param/{name}"
            if key not in arrays:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
            if arrays[key].shape != tensor.value.shape:
                raise ValueError(
                    f"tensor {name!r} has shape {arrays[key].shape} in checkpoint, model expects {tensor.value.shape}"
                )
        extra = sorted(k[len("param/"):] for k in arrays if k.startswith("param/") and k[len("param/"):] not in self.params)
        if extra:
            raise ValueError(f"checkpoint has tensors unknown to this model config: {extra[:3]}")
        for name, tensor in self.params.items():
            tensor.value = arrays[f"param/{name}"].copy()


class no_grad:
    """Temporarily mark all model parameters as constants."""

    def __init__(self, model: BamsModel):
        self.model = model
        self._flags: dict[str, bool] = {}

    def __enter__(self):
        for k, p in self.model.params.items():
            self._flags[k] = p.requires_grad
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for k, p in self.model.params.items():
            p.requires_grad = self._flags[k]
        return False
