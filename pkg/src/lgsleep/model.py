"""LG-Sleep network and the ablation backbones built from its sub-blocks.

Input trials are ``(B, n_slices, slice_len, 1)``. Every convolution, pooling
and upsampling layer is applied per slice (time-distributed) by folding the
slice axis into the batch axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import nn
from .errors import ShapeError
from .nn.layers import LSTM, BatchNorm1D, Conv1D, Dense, Dropout, MaxPool1D, ReLU, UpSample1D

BACKBONES = ("LGSleep", "CNN", "LSTM", "FC")


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes; the defaults are the full-width network."""

    n_slices: int = 19
    slice_len: int = 512
    conv_filters: int = 64
    conv_kernel: int = 64
    pool: int = 2
    conv_dropout: float = 0.5
    enc_hidden: int = 32
    latent_dropout: float = 0.4
    head_hidden: int = 32
    n_classes: int = 3
    dec_steps: int = 8
    dec_channels: int = 64
    dec_kernel: int = 9
    up1: int = 32
    up2: int = 2
    dec_dropout: float = 0.2
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.slice_len % self.pool:
            raise ValueError(f"slice_len {self.slice_len} not divisible by pool {self.pool}")
        if self.dec_steps * self.up1 * self.up2 != self.slice_len:
            raise ValueError(
                f"decoder length {self.dec_steps}x{self.up1}x{self.up2} does not rebuild "
                f"slice_len {self.slice_len}"
            )

    @property
    def dec_hidden(self) -> int:
        return self.dec_steps * self.dec_channels

    @property
    def pooled_len(self) -> int:
        return self.slice_len // self.pool

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


FULL = ModelConfig()
# Same topology at reduced width, sized for single-core CPU training.
DESK = ModelConfig(conv_filters=4, conv_kernel=16, dec_channels=4)
PRESETS = {"full": FULL, "desk": DESK}


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    classification: float
    reconstruction: float
    # additive pieces of ``total`` (only when requested); see ``grad_check``
    terms: Optional[np.ndarray] = field(default=None, compare=False, repr=False)


@dataclass
class LGSleepActivations:
    U: np.ndarray
    S: np.ndarray
    A: np.ndarray
    Z: np.ndarray
    X_hat: Optional[np.ndarray]


class Classifier:
    """dense(d_in -> hidden) + ReLU + dense(hidden -> classes); softmax applied by the loss."""

    def __init__(self, d_in, hidden, n_classes, rng, prefix="cls"):
        self.fc1 = Dense(f"{prefix}.fc1", d_in, hidden, rng)
        self.relu = ReLU()
        self.out = Dense(f"{prefix}.out", hidden, n_classes, rng)
        self.layers = [self.fc1, self.relu, self.out]

    def forward(self, a, training=False):
        for layer in self.layers:
            a = layer.forward(a, training)
        return a

    def backward(self, d):
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


class Network:
    """Shared plumbing: parameter listing, state snapshots, dropout seeding."""

    kind = ""
    has_decoder = False

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self._init_rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])

    # subclasses list their layers in forward order
    def all_layers(self):
        raise NotImplementedError

    def params(self) -> list[nn.Param]:
        out = []
        for layer in self.all_layers():
            out.extend(layer.params())
        return out

    def decoder_params(self) -> list[nn.Param]:
        return []

    def buffers(self) -> dict:
        out = {}
        for layer in self.all_layers():
            out.update(layer.buffers())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def reseed_dropout(self, seed):
        self.dropout_rng = np.random.default_rng(seed)
        for layer in self.all_layers():
            if isinstance(layer, Dropout):
                layer.rng = self.dropout_rng

    def state_dict(self) -> dict:
        sd = {f"param/{p.name}": p.value.copy() for p in self.params()}
        sd.update({f"buffer/{k}": np.array(v, dtype=np.float64) for k, v in self.buffers().items()})
        return sd

    def load_state_dict(self, sd: dict):
        for p in self.params():
            v = sd[f"param/{p.name}"]
            if v.shape != p.value.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {v.shape} != {p.value.shape}")
            p.value[...] = v
        bufs = {k[len("buffer/"):]: v for k, v in sd.items() if k.startswith("buffer/")}
        for layer in self.all_layers():
            if layer.buffers():
                layer.load_buffers(bufs)

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def _check_input(self, x):
        c = self.cfg
        if x.ndim != 4 or x.shape[1:] != (c.n_slices, c.slice_len, 1):
            raise ShapeError(
                f"{self.kind} expects (B, {c.n_slices}, {c.slice_len}, 1), got {x.shape}"
            )

    # encode -> head logits
    def encode(self, x, training=False):
        raise NotImplementedError

    def backward_encode(self, dA):
        raise NotImplementedError

    def logits(self, x, training=False):
        self._check_input(x)
        return self.head.forward(self.encode(x, training), training)


class _ConvStack:
    """conv -> BN -> ReLU -> max-pool -> dropout, applied to every slice."""

    def __init__(self, cfg: ModelConfig, rng, dropout_rng):
        self.conv = Conv1D("enc.conv", 1, cfg.conv_filters, cfg.conv_kernel, rng,
                           input_grad=False, bias=False)
        self.bn = BatchNorm1D("enc.bn", cfg.conv_filters, momentum=cfg.bn_momentum)
        self.relu = ReLU()
        self.pool = MaxPool1D(cfg.pool)
        self.drop = Dropout(cfg.conv_dropout, dropout_rng)
        self.layers = [self.conv, self.bn, self.relu, self.pool, self.drop]

    def forward(self, x, training):
        B, n, L, _ = x.shape
        h = x.reshape(B * n, L, 1)
        h = self.conv.forward(h, training)
        h = self.bn.forward(h, training)
        self.U = self.relu.forward(h, training)
        self.S = self.pool.forward(self.U, training)
        return self.drop.forward(self.S, training)

    def backward(self, d):
        for layer in (self.drop, self.pool, self.relu, self.bn, self.conv):
            d = layer.backward(d)


class LGSleep(Network):
    """CNN + LSTM encoder, dense classifier head, LSTM + CNN decoder."""

    kind = "LGSleep"
    has_decoder = True

    def __init__(self, cfg: ModelConfig = FULL, seed: int = 0):
        super().__init__(cfg, seed)
        rng, drng = self._init_rng, self.dropout_rng
        c = cfg
        self.stack = _ConvStack(c, rng, drng)
        self.enc_lstm = LSTM("enc.lstm", c.pooled_len * c.conv_filters, c.enc_hidden, rng)
        self.enc_relu = ReLU()
        self.enc_drop = Dropout(c.latent_dropout, drng)
        self.head = Classifier(c.enc_hidden, c.head_hidden, c.n_classes, rng)
        self.dec_lstm = LSTM("dec.lstm", c.enc_hidden, c.dec_hidden, rng)
        self.dec_drop = Dropout(c.dec_dropout, drng)
        self.up1 = UpSample1D(c.up1)
        self.dec_conv = Conv1D("dec.conv", c.dec_channels, c.dec_channels, c.dec_kernel, rng,
                               bias=False)
        self.dec_bn = BatchNorm1D("dec.bn", c.dec_channels, momentum=c.bn_momentum)
        self.dec_relu = ReLU()
        self.up2 = UpSample1D(c.up2)
        self.dec_out = Conv1D("dec.out", c.dec_channels, 1, 1, rng)

    def encoder_layers(self):
        return self.stack.layers + [self.enc_lstm, self.enc_relu, self.enc_drop]

    def decoder_layers(self):
        return [self.dec_lstm, self.dec_drop, self.up1, self.dec_conv, self.dec_bn,
                self.dec_relu, self.up2, self.dec_out]

    def all_layers(self):
        return self.encoder_layers() + self.head.layers + self.decoder_layers()

    def decoder_params(self):
        out = []
        for layer in self.decoder_layers():
            out.extend(layer.params())
        return out

    def encode(self, x, training=False):
        self._check_input(x)
        B, n = x.shape[:2]
        s = self.stack.forward(x, training)
        seq = s.reshape(B, n, -1)
        hs = self.enc_lstm.forward(seq, training)
        self._hs_shape = hs.shape
        a = self.enc_relu.forward(hs[:, -1], training)
        return self.enc_drop.forward(a, training)

    def backward_encode(self, dA):
        d = self.enc_drop.backward(dA)
        d = self.enc_relu.backward(d)
        dhs = np.zeros(self._hs_shape)
        dhs[:, -1] = d
        dseq = self.enc_lstm.backward(dhs)
        B, n = dseq.shape[:2]
        self.stack.backward(dseq.reshape(B * n, self.cfg.pooled_len, self.cfg.conv_filters))

    def decode(self, A, training=False):
        c = self.cfg
        if A.ndim != 2 or A.shape[1] != c.enc_hidden:
            raise ShapeError(f"decoder expects (B, {c.enc_hidden}), got {A.shape}")
        B = A.shape[0]
        rep = np.broadcast_to(A[:, None, :], (B, c.n_slices, c.enc_hidden))
        h = self.dec_lstm.forward(np.ascontiguousarray(rep), training)
        h = self.dec_drop.forward(h, training)
        h = h.reshape(B * c.n_slices, c.dec_steps, c.dec_channels)
        for layer in (self.up1, self.dec_conv, self.dec_bn, self.dec_relu, self.up2, self.dec_out):
            h = layer.forward(h, training)
        return h.reshape(B, c.n_slices, c.slice_len, 1)

    def backward_decode(self, dxhat):
        c = self.cfg
        B = dxhat.shape[0]
        d = dxhat.reshape(B * c.n_slices, c.slice_len, 1)
        for layer in (self.dec_out, self.up2, self.dec_relu, self.dec_bn, self.dec_conv, self.up1):
            d = layer.backward(d)
        d = self.dec_drop.backward(d.reshape(B, c.n_slices, c.dec_hidden))
        return self.dec_lstm.backward(d).sum(axis=1)

    def forward(self, x, training=False) -> LGSleepActivations:
        A = self.encode(x, training)
        z = nn.softmax(self.head.forward(A, training))
        xhat = self.decode(A, training)
        B, n = x.shape[:2]
        c = self.cfg
        U = self.stack.U.reshape(B, n, c.slice_len, c.conv_filters)
        S = self.stack.S.reshape(B, n, c.pooled_len, c.conv_filters)
        return LGSleepActivations(U, S, A, z, xhat)


class CNNBackbone(Network):
    """The encoder's convolutional block, flattened over all slices, into the head."""

    kind = "CNN"

    def __init__(self, cfg: ModelConfig = FULL, seed: int = 0):
        super().__init__(cfg, seed)
        c = cfg
        self.stack = _ConvStack(c, self._init_rng, self.dropout_rng)
        self.head = Classifier(c.n_slices * c.pooled_len * c.conv_filters, c.head_hidden,
                               c.n_classes, self._init_rng)

    def all_layers(self):
        return self.stack.layers + self.head.layers

    def encode(self, x, training=False):
        self._check_input(x)
        s = self.stack.forward(x, training)
        self._b = x.shape[0]
        return s.reshape(self._b, -1)

    def backward_encode(self, dA):
        c = self.cfg
        self.stack.backward(dA.reshape(self._b * c.n_slices, c.pooled_len, c.conv_filters))


class LSTMBackbone(Network):
    """The encoder's LSTM block fed raw slices (one slice per time step)."""

    kind = "LSTM"

    def __init__(self, cfg: ModelConfig = FULL, seed: int = 0):
        super().__init__(cfg, seed)
        c = cfg
        self.lstm = LSTM("enc.lstm", c.slice_len, c.enc_hidden, self._init_rng, input_grad=False)
        self.relu = ReLU()
        self.drop = Dropout(c.latent_dropout, self.dropout_rng)
        self.head = Classifier(c.enc_hidden, c.head_hidden, c.n_classes, self._init_rng)

    def all_layers(self):
        return [self.lstm, self.relu, self.drop] + self.head.layers

    def encode(self, x, training=False):
        self._check_input(x)
        hs = self.lstm.forward(x[..., 0], training)
        self._hs_shape = hs.shape
        return self.drop.forward(self.relu.forward(hs[:, -1], training), training)

    def backward_encode(self, dA):
        d = self.relu.backward(self.drop.backward(dA))
        dhs = np.zeros(self._hs_shape)
        dhs[:, -1] = d
        self.lstm.backward(dhs)


class FCBackbone(Network):
    """Whole trial flattened into dense(32) + ReLU, then the head."""

    kind = "FC"

    def __init__(self, cfg: ModelConfig = FULL, seed: int = 0):
        super().__init__(cfg, seed)
        c = cfg
        self.fc = Dense("fc.in", c.n_slices * c.slice_len, c.head_hidden, self._init_rng)
        self.relu = ReLU()
        self.head = Classifier(c.head_hidden, c.head_hidden, c.n_classes, self._init_rng)

    def all_layers(self):
        return [self.fc, self.relu] + self.head.layers

    def encode(self, x, training=False):
        self._check_input(x)
        return self.relu.forward(self.fc.forward(x.reshape(x.shape[0], -1), training), training)

    def backward_encode(self, dA):
        self.fc.backward(self.relu.backward(dA))


_KINDS = {"LGSleep": LGSleep, "CNN": CNNBackbone, "LSTM": LSTMBackbone, "FC": FCBackbone}


def build_backbone(kind: str, cfg: ModelConfig = FULL, seed: int = 0) -> Network:
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {', '.join(BACKBONES)}") from None
    return cls(cfg, seed)


# ----------------------------------------------------------------------- loss


def compute_loss(model: Network, x, labels, labeled=None, class_weights=None,
                 use_mse=True, training=True, backward=True, terms=False) -> LossBreakdown:
    """Classification loss on labeled rows plus (optionally) reconstruction on all rows.

    When ``backward`` is set, parameter gradients are reset and then filled
    with the gradient of the returned total. ``terms`` additionally returns
    the per-sample / per-element pieces whose sum is the total.
    """
    x = np.asarray(x, dtype=np.float64)
    B = x.shape[0]
    labels = np.asarray(labels) if labels is not None else np.full(B, -1)
    labeled = np.ones(B, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    labeled = labeled & (labels >= 0)
    use_mse = use_mse and model.has_decoder
    if not use_mse and not labeled.any():
        raise ValueError("classification-only loss needs at least one labeled trial")
    if backward:
        model.zero_grad()
    A = model.encode(x, training)
    lc, lm = 0.0, 0.0
    pieces = []
    dA = np.zeros_like(A)
    if labeled.any():
        rows = np.flatnonzero(labeled) if not labeled.all() else slice(None)
        logits = model.head.forward(A[rows], training)
        lc, dlogits = nn.softmax_xent(logits, labels[rows], class_weights)
        if terms:
            pieces.append(nn.softmax_xent_terms(logits, labels[rows], class_weights))
        if backward:
            dA[rows] = model.head.backward(dlogits)
    if use_mse:
        xhat = model.decode(A, training)
        lm, dxhat = nn.mse(x, xhat)
        if terms:
            pieces.append(nn.mse_terms(x, xhat))
        if backward:
            dA += model.backward_decode(dxhat)
    total = lc + lm
    if backward:
        model.backward_encode(dA)
    return LossBreakdown(total, lc, lm, np.concatenate(pieces) if terms else None)


def lg_sleep_loss(model: Network, x, labels, class_weights=None, phase=1, labeled=None,
                  training=True, backward=True, terms=False) -> LossBreakdown:
    """Phase 1: equal-weight L_c on labeled rows + L_mse on all rows.
    Phase 2: weighted L_c on labeled rows only."""
    if phase == 1:
        return compute_loss(model, x, labels, labeled, None, True, training, backward, terms)
    if phase == 2:
        return compute_loss(model, x, labels, labeled, class_weights, False, training, backward,
                            terms)
    raise ValueError(f"phase must be 1 or 2, got {phase}")


# ----------------------------------------------------------------- inference


def predict_proba(model: Network, x, batch_size=256) -> np.ndarray:
    x = np.asarray(x)
    out = [nn.softmax(model.logits(np.asarray(x[i:i + batch_size], dtype=np.float64), False))
           for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, model.cfg.n_classes))
    return np.concatenate(out)


def predict(model: Network, x, batch_size=256):
    """Inference-mode stages (argmax, ties to the lower index) and probabilities."""
    p = predict_proba(model, x, batch_size)
    return p.argmax(axis=1), p


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: Network, optimizer: Optional[nn.Adam] = None, extra=None):
    arrays = model.state_dict()
    meta = {"kind": model.kind, "config": asdict(model.cfg), "seed": model.seed,
            "extra": extra or {}}
    if optimizer is not None:
        arrays.update({f"adam/{k}": v for k, v in optimizer.state().items()})
        meta["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                        "beta2": optimizer.beta2, "eps": optimizer.eps}
    nn.write_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Returns ``(model, optimizer or None, extra metadata)``."""
    arrays, meta = nn.read_arrays(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_backbone(meta["kind"], cfg, meta.get("seed", 0))
    model.load_state_dict(arrays)
    opt = None
    if "adam" in meta:
        a = meta["adam"]
        opt = nn.Adam(model.params(), a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.load_state({k[len("adam/"):]: v for k, v in arrays.items() if k.startswith("adam/")}, a["t"])
    return model, opt, meta.get("extra", {})
