"""The constraint network: projection, SSM blocks with interleaved dual-head
attention, and the energy head, with mean + alpha * max aggregation.

A sequence of embedding vectors goes in; a scalar coherence energy and a
per-position energy decomposition come out. Low energy means coherent.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binio import ByteReader, fnv1a64, pack_u16, pack_u32, pack_u64
from .errors import ConfigError, DataError
from .kvtext import dumps as kv_dumps, loads as kv_loads
from .sequences import EmbeddingSequence

CHECKPOINT_MAGIC = b"EBCK"
CHECKPOINT_VERSION = 1

# softplus(-log 9) = log(10/9), so the initial per-channel decay is exactly 0.9
_DECAY_INIT = -float(np.log(9.0))


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 768
    model_dim: int = 384
    ssm_blocks: int = 6
    attention_after: tuple[int, ...] = (2, 4)
    conv_kernel_width: int = 4
    energy_hidden: int = 1024
    alpha: float = 0.3
    max_positions: int = 256

    def validate(self) -> "NetworkConfig":
        if self.input_dim <= 0 or self.model_dim <= 0:
            raise ConfigError("input_dim and model_dim must be positive")
        if self.model_dim % 2 != 0:
            raise ConfigError(f"model_dim must be even for the two attention halves, got {self.model_dim}")
        if self.ssm_blocks < 2:
            raise ConfigError("need at least two state blocks")
        for pos in self.attention_after:
            if not 1 <= pos <= self.ssm_blocks - 1:
                raise ConfigError(
                    f"attention insertion {pos} must lie strictly inside [1, {self.ssm_blocks - 1}]"
                )
        if len(set(self.attention_after)) != len(self.attention_after):
            raise ConfigError("attention insertions must be distinct")
        if self.conv_kernel_width < 1:
            raise ConfigError("conv_kernel_width must be >= 1")
        if self.energy_hidden < 1:
            raise ConfigError("energy_hidden must be >= 1")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")
        return self

    def to_kv(self) -> dict[str, str]:
        return {
            "config.input_dim": str(self.input_dim),
            "config.model_dim": str(self.model_dim),
            "config.ssm_blocks": str(self.ssm_blocks),
            "config.attention_after": ",".join(str(p) for p in self.attention_after),
            "config.conv_kernel_width": str(self.conv_kernel_width),
            "config.energy_hidden": str(self.energy_hidden),
            "config.alpha": repr(self.alpha),
            "config.max_positions": str(self.max_positions),
        }

    @staticmethod
    def from_kv(entries: dict[str, str]) -> "NetworkConfig":
        def get(key, default):
            return entries.get(f"config.{key}", default)

        return NetworkConfig(
            input_dim=int(get("input_dim", 768)),
            model_dim=int(get("model_dim", 384)),
            ssm_blocks=int(get("ssm_blocks", 6)),
            attention_after=tuple(
                int(p) for p in str(get("attention_after", "2,4")).split(",") if p
            ),
            conv_kernel_width=int(get("conv_kernel_width", 4)),
            energy_hidden=int(get("energy_hidden", 1024)),
            alpha=float(get("alpha", 0.3)),
            max_positions=int(get("max_positions", 256)),
        ).validate()


@dataclass
class EnergyReport:
    """Scalar energy, its per-position decomposition, and the aggregation
    coefficient that produced it. ``total_energy`` is always re-derivable as
    mean(per_position) + alpha_used * max(per_position)."""

    total_energy: float
    per_position: np.ndarray
    alpha_used: float


def aggregate_energy(per_position: np.ndarray, alpha: float) -> float:
    """mean(e_i) + alpha * max(e_i); the max term keeps localized violations
    from being diluted by the mean."""
    e = np.asarray(per_position, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise DataError(f"per-position energies must be a nonempty vector, got shape {e.shape}")
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    return float(e.mean() + alpha * e.max())


def make_report(per_position: np.ndarray, alpha: float) -> EnergyReport:
    e = np.asarray(per_position, dtype=np.float64)
    return EnergyReport(aggregate_energy(e, alpha), e, float(alpha))


class ConstraintNetwork:
    """A parameter set for one branch plus its forward pass.

    Forward on a frozen network (requires_grad False everywhere, no active
    tape) is pure and thread-safe. Training mutates parameters through one
    trainer context only.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config.validate()
        self.params = params

    # -- construction -------------------------------------------------------

    # near-zero init scale for the final energy layer: initial energies are
    # position-constant to ~1e-3, stabilizing the hinge loss early, while an
    # untrained network still scores pairs at chance instead of exact ties
    FINAL_LAYER_SCALE = 1e-4

    @staticmethod
    def initialize(
        config: NetworkConfig,
        seed: int = 0,
        dtype=np.float64,
        trainable: bool = True,
        zero_energy_out: bool = True,
    ) -> "ConstraintNetwork":
        """Fan-in uniform init; the final energy-head layer starts near zero
        (see ``FINAL_LAYER_SCALE``). Disable via ``zero_energy_out`` for a
        full-scale final layer."""
        config = config.validate()
        rng = np.random.default_rng(np.random.SeedSequence((0x45424B, seed)))
        d = config.model_dim
        params: dict[str, Tensor] = {}

        def mat(name, fan_in, fan_out, scale=1.0):
            bound = scale / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[name] = Tensor(w.astype(dtype), requires_grad=trainable)

        def vec(name, size, value=0.0):
            params[name] = Tensor(
                np.full(size, value, dtype=dtype), requires_grad=trainable
            )

        mat("proj.weight", config.input_dim, d)
        for i in range(1, config.ssm_blocks + 1):
            k = config.conv_kernel_width
            bound = 1.0 / np.sqrt(k)
            params[f"ssm{i}.conv"] = Tensor(
                rng.uniform(-bound, bound, size=(d, k)).astype(dtype),
                requires_grad=trainable,
            )
            mat(f"ssm{i}.gate_w", d, d)
            vec(f"ssm{i}.gate_b", d)
            vec(f"ssm{i}.decay", d, _DECAY_INIT)
            mat(f"ssm{i}.mix", d, d)
        for j in range(1, len(config.attention_after) + 1):
            mat(f"attn{j}.head1", d, d // 2)
            mat(f"attn{j}.head2", d, d // 2)
            mat(f"attn{j}.out", d, d)
        vec("head.ln_scale", d, 1.0)
        vec("head.ln_shift", d)
        mat("head.mlp1_w", d, config.energy_hidden)
        vec("head.mlp1_b", config.energy_hidden)
        mat(
            "head.mlp2_w",
            config.energy_hidden,
            1,
            scale=ConstraintNetwork.FINAL_LAYER_SCALE if zero_energy_out else 1.0,
        )
        vec("head.mlp2_b", 1)
        return ConstraintNetwork(config, params)

    # -- introspection -------------------------------------------------------

    @property
    def dtype(self):
        return self.params["proj.weight"].data.dtype

    @property
    def parameter_count(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def decay_coefficients(self, block: int) -> np.ndarray:
        lam = self.params[f"ssm{block}.decay"].data
        return np.exp(-np.logaddexp(0.0, lam))

    def freeze(self) -> "ConstraintNetwork":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def parameter_bytes(self) -> bytes:
        buf = io.BytesIO()
        for name in self.params:
            buf.write(np.ascontiguousarray(self.params[name].data).tobytes())
        return buf.getvalue()

    # -- forward pieces ------------------------------------------------------

    def _ssm_block(self, x: Tensor, i: int) -> Tensor:
        u = ad.depthwise_causal_conv(x, self.params[f"ssm{i}.conv"])
        a = ad.exp(ad.scalar_mul(ad.softplus(self.params[f"ssm{i}.decay"]), -1.0))
        s = ad.decay_scan(a, u)
        g = ad.sigmoid(
            ad.add_bias(ad.matmul(x, self.params[f"ssm{i}.gate_w"]), self.params[f"ssm{i}.gate_b"])
        )
        return ad.add(x, ad.matmul(ad.mul(g, s), self.params[f"ssm{i}.mix"]))

    def _attention_block(self, x: Tensor, j: int) -> Tensor:
        positions = x.shape[1]
        half = self.config.model_dim // 2
        scale = 1.0 / np.sqrt(half)
        h1 = ad.matmul(x, self.params[f"attn{j}.head1"])
        h2 = ad.matmul(x, self.params[f"attn{j}.head2"])
        w1 = ad.softmax(
            ad.self_scores(h1, scale), mask=ad.causal_mask(positions, dtype=x.dtype)
        )
        w2 = ad.softmax(ad.self_scores(h2, scale))
        out1 = ad.attend(w1, h1)
        out2 = ad.attend(w2, h2)
        mixed = ad.matmul(ad.concat_last([out1, out2]), self.params[f"attn{j}.out"])
        return ad.add(x, mixed)

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3:
            raise DataError(f"expected a (batch, positions, dim) array, got shape {x.shape}")
        b, p, dim = x.shape
        if dim != self.config.input_dim:
            raise DataError(
                f"input dim {dim} does not match network input_dim {self.config.input_dim}"
            )
        if p < 1:
            raise DataError("sequence must have at least one position")
        if p > self.config.max_positions:
            raise DataError(
                f"position count {p} exceeds max_positions {self.config.max_positions}"
            )
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        return x

    def features(self, x: Tensor) -> Tensor:
        """Trunk output (batch, positions, model_dim): the representation
        immediately before the energy head."""
        checked = self._check_batch(x.data)
        if checked is not x.data:
            x = Tensor(checked, requires_grad=x.requires_grad)
        h = ad.matmul(x, self.params["proj.weight"])
        attn_index = 0
        for i in range(1, self.config.ssm_blocks + 1):
            h = self._ssm_block(h, i)
            if i in self.config.attention_after:
                attn_index += 1
                h = self._attention_block(h, attn_index)
        return h

    def energy_head(self, features: Tensor) -> Tensor:
        normed = ad.layer_norm(
            features, self.params["head.ln_scale"], self.params["head.ln_shift"]
        )
        hidden = ad.silu(
            ad.add_bias(ad.matmul(normed, self.params["head.mlp1_w"]), self.params["head.mlp1_b"])
        )
        e = ad.add_bias(ad.matmul(hidden, self.params["head.mlp2_w"]), self.params["head.mlp2_b"])
        b, p = features.shape[0], features.shape[1]
        return ad.reshape(e, (b, p))

    def position_energies(self, x: Tensor) -> Tensor:
        """Per-position energies (batch, positions); tape-aware."""
        return self.energy_head(self.features(x))

    def total_energies(self, x: Tensor) -> Tensor:
        """Aggregated scalar energy per batch item; tape-aware."""
        e = self.position_energies(x)
        return ad.add(ad.mean_axis(e, 1), ad.scalar_mul(ad.max_axis(e, 1), self.config.alpha))

    # -- public inference ----------------------------------------------------

    def forward(self, seq: EmbeddingSequence | np.ndarray) -> EnergyReport:
        arr = seq.data if isinstance(seq, EmbeddingSequence) else np.asarray(seq)
        if arr.ndim != 2:
            raise DataError(f"expected a (positions, dim) sequence, got shape {arr.shape}")
        e = self.position_energies(Tensor(arr[None, :, :])).data[0]
        return make_report(e, self.config.alpha)

    def forward_batch(self, arrays: np.ndarray) -> list[EnergyReport]:
        e = self.position_energies(Tensor(arrays)).data
        return [make_report(row, self.config.alpha) for row in e]

    def batch_position_energies(self, arrays: np.ndarray) -> np.ndarray:
        return self.position_energies(Tensor(arrays)).data


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic "EBCK" | u16 version | u32 header length | header (canonical
# key-value text: config.* plus param.<name>=<offset>:<shape>) | payload of
# 32-bit little-endian parameters | u64 FNV-1a checksum of the payload.


def save_checkpoint(net: ConstraintNetwork, path) -> None:
    offsets: dict[str, int] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in net.params.items():
        raw = np.ascontiguousarray(tensor.data.astype("<f4")).tobytes()
        offsets[name] = offset
        offset += len(raw)
        chunks.append(raw)
    payload = b"".join(chunks)

    entries = net.config.to_kv()
    entries["format.version"] = str(CHECKPOINT_VERSION)
    for name, tensor in net.params.items():
        shape = "x".join(str(s) for s in tensor.data.shape)
        entries[f"param.{name}"] = f"{offsets[name]}:{shape}"
    header = kv_dumps(entries).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(pack_u16(CHECKPOINT_VERSION))
        fh.write(pack_u32(len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(pack_u64(fnv1a64(payload)))


def load_checkpoint(path, dtype=np.float32, trainable: bool = False) -> ConstraintNetwork:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = ByteReader(blob, f"checkpoint {path}")
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"checkpoint {path}: magic: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    version = r.u16("version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path}: version: expected {CHECKPOINT_VERSION}, got {version}")
    header_len = r.u32("header length")
    header = kv_loads(r.take(header_len, "header").decode("utf-8"))
    config = NetworkConfig.from_kv(header)

    params_meta = []
    for key, value in header.items():
        if not key.startswith("param."):
            continue
        name = key[len("param.") :]
        off_s, shape_s = value.split(":", 1)
        shape = tuple(int(s) for s in shape_s.split("x"))
        params_meta.append((int(off_s), name, shape))
    params_meta.sort()

    if r.remaining() < 8:
        raise DataError(f"checkpoint {path}: truncated file at byte offset {len(blob)}")
    payload = r.take(r.remaining() - 8, "parameter payload")
    stated = r.u64("checksum")
    actual = fnv1a64(payload)
    if stated != actual:
        raise DataError(
            f"checkpoint {path}: checksum mismatch: header says {stated:#018x}, payload hashes to {actual:#018x}"
        )

    params: dict[str, Tensor] = {}
    for off, name, shape in params_meta:
        count = int(np.prod(shape))
        raw = payload[off : off + 4 * count]
        if len(raw) != 4 * count:
            raise DataError(f"checkpoint {path}: parameter {name} extends past payload")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=trainable)
    return ConstraintNetwork(config, params)
