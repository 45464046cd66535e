"""The full classifier: front-end, four CNN branches, MLP head.

Each of the four band signals feeds its own branch:
conv(8 filters, k=5, valid) -> batchnorm -> relu -> dropout -> maxpool(2)
-> conv(4 filters, k=5) -> batchnorm -> relu -> dropout -> maxpool(2).
Branch outputs are flattened, concatenated, and classified by a dense
hidden layer of 20 relu units and one sigmoid output.

The front-end is either one of the learnable band-splitting layers or
"external_fir": the model then takes input already decomposed into four
bands by a fixed filter bank, aligned the same way the conv front-end
aligns its output (centered, not causal), so a frozen fir-initialized
front-end and the external decomposition produce identical probabilities.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError
from .fir import FilterBank, default_bank
from .frontend import InitScheme, TConvLayer, init_kernel

FRONTENDS = ("external_fir", "tconv_free", "tconv_lp", "tconv_zp")
_VARIANT_OF = {"tconv_free": "free", "tconv_lp": "linear_phase", "tconv_zp": "zero_phase"}

CKPT_MAGIC = b"PCGNET\x00\x01"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    frontend: str = "external_fir"
    init: str = "fir_bank"          # ignored for external_fir
    frontend_trainable: bool = True
    bands: int = 4
    kernel_len: int = 61            # front-end kernel length (odd)
    branch_kernel: int = 5
    conv1_filters: int = 8
    conv2_filters: int = 4
    pool: int = 2
    hidden: int = 20
    dropout: float = 0.5
    l2_conv: float = 0.0486
    input_len: int = 2500
    seed: int = 0

    def __post_init__(self):
        if self.frontend not in FRONTENDS:
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.frontend == "external_fir" and self.init == "zeros":
            raise ValueError("zeros init is meaningless for the external_fir frontend")
        if self.bands != 4 or self.branch_kernel != 5 or self.conv1_filters != 8 \
                or self.conv2_filters != 4 or self.hidden != 20:
            raise ValueError("branch topology is fixed: 4 bands, kernel 5, 8/4 filters, 20 hidden")
        if self.kernel_len % 2 == 0:
            raise ValueError("front-end kernel length must be odd")
        if self.input_len < 20:
            raise ValueError("input_len must be >= 20")


def branch_feature_len(input_len: int, kernel: int = 5, pool: int = 2) -> int:
    """Length after conv(valid)->pool->conv(valid)->pool."""
    n = input_len - (kernel - 1)
    n //= pool
    n -= kernel - 1
    return n // pool


def flatten_width(cfg: NetworkConfig) -> int:
    return cfg.bands * cfg.conv2_filters * branch_feature_len(
        cfg.input_len, cfg.branch_kernel, cfg.pool)


@dataclass
class _Branch:
    w1: ad.Tensor
    b1: ad.Tensor
    bn1_gamma: ad.Tensor
    bn1_beta: ad.Tensor
    bn1_state: ad.BatchNormState
    w2: ad.Tensor
    b2: ad.Tensor
    bn2_gamma: ad.Tensor
    bn2_beta: ad.Tensor
    bn2_state: ad.BatchNormState


@dataclass
class Network:
    config: NetworkConfig
    frontend: TConvLayer | None
    bank: FilterBank | None        # used by the external_fir input path
    branches: list[_Branch]
    head_w1: ad.Tensor
    head_b1: ad.Tensor
    head_w2: ad.Tensor
    head_b2: ad.Tensor
    step: int = 0

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        """Trainable parameters in a fixed, checkpoint-stable order."""
        out: list[tuple[str, ad.Tensor]] = []
        if self.frontend is not None:
            out.extend(self.frontend.parameters())
        for i, br in enumerate(self.branches):
            out.extend([
                (f"branch{i}.w1", br.w1), (f"branch{i}.b1", br.b1),
                (f"branch{i}.bn1.gamma", br.bn1_gamma), (f"branch{i}.bn1.beta", br.bn1_beta),
                (f"branch{i}.w2", br.w2), (f"branch{i}.b2", br.b2),
                (f"branch{i}.bn2.gamma", br.bn2_gamma), (f"branch{i}.bn2.beta", br.bn2_beta),
            ])
        out.extend([("head.w1", self.head_w1), ("head.b1", self.head_b1),
                    ("head.w2", self.head_w2), ("head.b2", self.head_b2)])
        return out

    def conv_weights(self) -> list[ad.Tensor]:
        """Branch convolution kernels (the L2-regularized set)."""
        out = []
        for br in self.branches:
            out.extend([br.w1, br.w2])
        return out

    def _blobs(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array: parameters, frozen kernels, running stats."""
        out: list[tuple[str, np.ndarray]] = []
        if self.frontend is not None:
            out.extend(self.frontend.state_arrays())
        for i, br in enumerate(self.branches):
            out.extend([
                (f"branch{i}.w1", br.w1.data), (f"branch{i}.b1", br.b1.data),
                (f"branch{i}.bn1.gamma", br.bn1_gamma.data),
                (f"branch{i}.bn1.beta", br.bn1_beta.data),
                (f"branch{i}.bn1.mean", br.bn1_state.mean),
                (f"branch{i}.bn1.var", br.bn1_state.var),
                (f"branch{i}.w2", br.w2.data), (f"branch{i}.b2", br.b2.data),
                (f"branch{i}.bn2.gamma", br.bn2_gamma.data),
                (f"branch{i}.bn2.beta", br.bn2_beta.data),
                (f"branch{i}.bn2.mean", br.bn2_state.mean),
                (f"branch{i}.bn2.var", br.bn2_state.var),
            ])
        out.extend([("head.w1", self.head_w1.data), ("head.b1", self.head_b1.data),
                    ("head.w2", self.head_w2.data), ("head.b2", self.head_b2.data)])
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def trainable_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    # -- forward ----------------------------------------------------------

    def forward(self, batch: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> ad.Tensor:
        """Per-cycle abnormality probabilities, shape [batch].

        For the external_fir frontend `batch` must be pre-decomposed
        [batch, 4, input_len]; for conv front-ends it is raw
        [batch, 1, input_len] (a [batch, input_len] array is accepted and
        expanded).
        """
        cfg = self.config
        if train and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        batch = np.asarray(batch, dtype=np.float64)
        if self.frontend is None:
            if batch.ndim != 3 or batch.shape[1] != cfg.bands:
                raise ValueError(f"external_fir expects [batch, {cfg.bands}, L], "
                                 f"got {batch.shape}")
            bands = ad.tensor(batch)
        else:
            if batch.ndim == 2:
                batch = batch[:, None, :]
            if batch.ndim != 3 or batch.shape[1] != 1:
                raise ValueError(f"conv frontend expects [batch, 1, L], got {batch.shape}")
            bands = self.frontend.forward(ad.tensor(batch))

        feats = []
        for i, br in enumerate(self.branches):
            xb = ad.slice_channels(bands, i, i + 1)
            h = ad.conv1d(xb, br.w1, padding="valid")
            h = ad.add_channel_bias(h, br.b1)
            h = ad.batchnorm1d(h, br.bn1_gamma, br.bn1_beta, br.bn1_state, train)
            h = ad.relu(h)
            h = ad.dropout(h, cfg.dropout, train, rng) if train else h
            h = ad.maxpool1d(h, cfg.pool)
            h = ad.conv1d(h, br.w2, padding="valid")
            h = ad.add_channel_bias(h, br.b2)
            h = ad.batchnorm1d(h, br.bn2_gamma, br.bn2_beta, br.bn2_state, train)
            h = ad.relu(h)
            h = ad.dropout(h, cfg.dropout, train, rng) if train else h
            h = ad.maxpool1d(h, cfg.pool)
            feats.append(ad.reshape(h, (batch.shape[0], -1)))
        z = ad.concat(feats, axis=1)
        z = ad.relu(ad.dense(z, self.head_w1, self.head_b1))
        out = ad.sigmoid(ad.dense(z, self.head_w2, self.head_b2))
        return ad.reshape(out, (batch.shape[0],))

    def l2_penalty(self) -> ad.Tensor | None:
        if self.config.l2_conv == 0.0:
            return None
        total = None
        for w in self.conv_weights():
            term = ad.sum_of_squares(w)
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, self.config.l2_conv)

    def decompose(self, raw: np.ndarray) -> np.ndarray:
        """Fixed-bank band decomposition for the external_fir input path.

        Centered alignment (numpy "same" convolution), matching the conv
        front-end's output sample-for-sample.
        """
        if self.bank is None:
            raise ValueError("this network has a conv frontend; feed it raw cycles")
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[None, :]
        out = np.empty((raw.shape[0], len(self.bank.filters), raw.shape[1]))
        for bi, f in enumerate(self.bank.filters):
            for r in range(raw.shape[0]):
                out[r, bi] = np.convolve(raw[r], f.coeffs, mode="same")
        return out


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build(config: NetworkConfig, bank: FilterBank | None = None) -> Network:
    """Deterministically initialize a network from config.seed.

    Each component draws from its own seed stream, so nets that share a
    seed get identical branch and head parameters regardless of the
    front-end choice.
    """
    cfg = config
    streams = np.random.SeedSequence(cfg.seed).spawn(6)
    k = cfg.branch_kernel

    frontend = None
    if cfg.frontend != "external_fir":
        shape = (cfg.bands, 1, cfg.kernel_len)
        if cfg.init == "fir_bank":
            if bank is None:
                bank = default_bank(1000.0, cfg.kernel_len - 1)
            kern = init_kernel(InitScheme("fir_bank", source_bank=bank), shape)
        elif cfg.init == "zeros":
            kern = np.zeros(shape)
        elif cfg.init in ("random", "he"):
            rng0 = np.random.default_rng(streams[0])
            kern = _he_normal(rng0, shape, fan_in=cfg.kernel_len)
        else:
            raise ValueError(f"unknown init {cfg.init!r}")
        frontend = TConvLayer(_VARIANT_OF[cfg.frontend], kern, trainable=cfg.frontend_trainable)
    else:
        if bank is None:
            bank = default_bank(1000.0, cfg.kernel_len - 1)

    branches = []
    for i in range(cfg.bands):
        rng = np.random.default_rng(streams[1 + i])
        branches.append(_Branch(
            w1=ad.parameter(_he_normal(rng, (cfg.conv1_filters, 1, k), 1 * k)),
            b1=ad.parameter(np.zeros(cfg.conv1_filters)),
            bn1_gamma=ad.parameter(np.ones(cfg.conv1_filters)),
            bn1_beta=ad.parameter(np.zeros(cfg.conv1_filters)),
            bn1_state=ad.BatchNormState(cfg.conv1_filters),
            w2=ad.parameter(_he_normal(rng, (cfg.conv2_filters, cfg.conv1_filters, k),
                                       cfg.conv1_filters * k)),
            b2=ad.parameter(np.zeros(cfg.conv2_filters)),
            bn2_gamma=ad.parameter(np.ones(cfg.conv2_filters)),
            bn2_beta=ad.parameter(np.zeros(cfg.conv2_filters)),
            bn2_state=ad.BatchNormState(cfg.conv2_filters),
        ))

    rng = np.random.default_rng(streams[5])
    width = flatten_width(cfg)
    net = Network(
        config=cfg, frontend=frontend, bank=bank, branches=branches,
        head_w1=ad.parameter(_he_normal(rng, (width, cfg.hidden), width)),
        head_b1=ad.parameter(np.zeros(cfg.hidden)),
        head_w2=ad.parameter(_he_normal(rng, (cfg.hidden, 1), cfg.hidden)),
        head_b2=ad.parameter(np.zeros(1)),
    )
    return net


def aggregate_recording(cycle_probs) -> tuple[float, int]:
    """Average per-cycle probabilities and round; exactly 0.5 rounds up.

    The mean is taken over the sorted values so it does not depend on the
    order cycles were stored in.
    """
    probs = np.asarray(list(cycle_probs), dtype=np.float64)
    if probs.size == 0:
        raise ValueError("no cycle probabilities to aggregate")
    prob = float(np.sort(probs).mean())
    return prob, int(prob >= 0.5)


# ---------------------------------------------------------------------------
# checkpoint io

def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def save(net: Network, path: str) -> None:
    """Write a bit-exact snapshot: config, every array, running stats, step."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg_json = json.dumps(asdict(net.config), sort_keys=True,
                          separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<Q", net.step))
    blobs = net._blobs()
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path: str) -> Network:
    """Rebuild a network from a checkpoint; fails cleanly on truncation."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from None
    with fh:
        if _read_exact(fh, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            cfg = NetworkConfig(**json.loads(_read_exact(fh, cfg_len)))
        except (ValueError, TypeError) as e:
            raise CheckpointError(f"bad config in checkpoint: {e}") from None
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read_exact(fh, 8 * n_items), dtype="<f8").reshape(shape)
            blobs[name] = arr.copy()

    net = build(cfg)
    expected = [name for name, _ in net._blobs()]
    if set(expected) != set(blobs):
        missing = set(expected) - set(blobs)
        extra = set(blobs) - set(expected)
        raise CheckpointError(f"checkpoint blob mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
    _restore(net, blobs)
    net.step = step
    return net


def _restore(net: Network, blobs: dict[str, np.ndarray]) -> None:
    if net.frontend is not None:
        for name, arr in net.frontend.state_arrays():
            arr[...] = blobs[name]
    for i, br in enumerate(net.branches):
        br.w1.data[...] = blobs[f"branch{i}.w1"]
        br.b1.data[...] = blobs[f"branch{i}.b1"]
        br.bn1_gamma.data[...] = blobs[f"branch{i}.bn1.gamma"]
        br.bn1_beta.data[...] = blobs[f"branch{i}.bn1.beta"]
        br.bn1_state.mean[...] = blobs[f"branch{i}.bn1.mean"]
        br.bn1_state.var[...] = blobs[f"branch{i}.bn1.var"]
        br.w2.data[...] = blobs[f"branch{i}.w2"]
        br.b2.data[...] = blobs[f"branch{i}.b2"]
        br.bn2_gamma.data[...] = blobs[f"branch{i}.bn2.gamma"]
        br.bn2_beta.data[...] = blobs[f"branch{i}.bn2.beta"]
        br.bn2_state.mean[...] = blobs[f"branch{i}.bn2.mean"]
        br.bn2_state.var[...] = blobs[f"branch{i}.bn2.var"]
    net.head_w1.data[...] = blobs["head.w1"]
    net.head_b1.data[...] = blobs["head.b1"]
    net.head_w2.data[...] = blobs["head.w2"]
    net.head_b2.data[...] = blobs["head.b2"]
