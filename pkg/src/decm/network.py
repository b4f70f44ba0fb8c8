"""Two-time-conditioned velocity field and its flow map.

The network F(x, t, s, class) is a tanh MLP over the concatenation of the
state, sinusoidal embeddings of both times, and a learned class embedding
(one reserved row encodes "unconditional"). The flow map is
f(x, t, s) = x + (s - t) * F(x, t, s), which is the identity at s == t by
construction. A teacher variant omits the s pathway entirely so its output
depends on (x, t, class) alone.

The forward code is written against the autodiff primitives, so the same
function runs in plain numpy, on a tape, or in dual-number mode.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import autodiff as ad

__all__ = [
    "VelocityNet",
    "EmaShadow",
    "ema_update",
    "eval_F",
    "flow_map",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"DECM"
CHECKPOINT_VERSION = 1


def time_embedding_freqs(n_freqs: int) -> np.ndarray:
    # geometric ladder; capped so d(emb)/dt stays moderate for JVP passes
    return np.geomspace(1.0, 200.0, n_freqs)


def sinusoidal_embedding(t, freqs: np.ndarray):
    """Map times (batch,) to [sin(f*t), cos(f*t)] features, (batch, 2F)."""
    tcol = ad.reshape(t, (-1, 1))
    arg = ad.mul(tcol, freqs[None, :])
    return ad.concat([ad.sin(arg), ad.cos(arg)], axis=1)


class VelocityNet:
    """MLP velocity field F(x, t, s, class) with optional s conditioning."""

    def __init__(
        self,
        dim_x: int = 2,
        n_classes: int = 0,
        hidden_dim: int = 256,
        n_hidden: int = 4,
        n_freqs: int = 16,
        class_dim: int = 16,
        with_s: bool = True,
        seed: int = 0,
    ):
        self.dim_x = dim_x
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.n_hidden = n_hidden
        self.n_freqs = n_freqs
        self.class_dim = class_dim if n_classes > 0 else 0
        self.with_s = with_s
        self.freqs = time_embedding_freqs(n_freqs)

        temb = 2 * n_freqs
        self.in_dim = dim_x + temb + (temb if with_s else 0) + self.class_dim
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        dims = [self.in_dim] + [hidden_dim] * n_hidden + [dim_x]
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            if i == len(dims) - 2:
                W = np.zeros((fan_in, fan_out))  # zero-init head: F == 0 at start
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))
            self.params.append(W)
            self.params.append(np.zeros(fan_out))
        if self.class_dim:
            # n_classes + 1 rows; the last row is the unconditional embedding
            self.params.append(rng.normal(0.0, 0.3, (n_classes + 1, self.class_dim)))

    # -- structural helpers -------------------------------------------------

    @property
    def n_weight_arrays(self) -> int:
        return len(self.params)

    def copy(self) -> "VelocityNet":
        twin = self.spawn_like()
        twin.params = [p.copy() for p in self.params]
        return twin

    def spawn_like(self) -> "VelocityNet":
        return VelocityNet(
            dim_x=self.dim_x,
            n_classes=self.n_classes,
            hidden_dim=self.hidden_dim,
            n_hidden=self.n_hidden,
            n_freqs=self.n_freqs,
            class_dim=self.class_dim or 16,
            with_s=self.with_s,
        )

    def onehot(self, labels) -> np.ndarray:
        """Rows of the (n_classes+1)-way indicator; None selects the
        unconditional row for the whole batch."""
        if self.class_dim == 0:
            raise ValueError("network is unconditional; no class pathway")
        if labels is None:
            labels = np.full(1, self.n_classes, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if np.any(labels < 0) or np.any(labels > self.n_classes):
            raise ValueError("class label out of range")
        out = np.zeros((len(labels), self.n_classes + 1))
        out[np.arange(len(labels)), labels] = 1.0
        return out

    # -- evaluation ----------------------------------------------------------

    def apply(self, params, x, t, s, onehot=None):
        """Mode-generic forward pass.

        `params` may be plain arrays, tape Vars, or anything the primitives
        accept; `x`, `t`, `s` may be plain or DualValue. `onehot` is always a
        constant indicator matrix (labels carry no derivative).
        """
        feats = [x, sinusoidal_embedding(t, self.freqs)]
        if self.with_s:
            feats.append(sinusoidal_embedding(s, self.freqs))
        if self.class_dim:
            if onehot is None:
                raise ValueError("conditional network requires class labels")
            feats.append(ad.matmul(onehot, params[-1]))
        h = ad.concat(feats, axis=1)
        n_affine = self.n_hidden + 1
        for i in range(n_affine):
            W, b = params[2 * i], params[2 * i + 1]
            h = ad.add(ad.matmul(h, W), b)
            if i < n_affine - 1:
                h = ad.tanh(h)
        return h

    def __call__(self, x, t, s, labels=None) -> np.ndarray:
        """Plain numpy evaluation at (x, t, s, labels)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = _clean_time(t, len(x), "t")
        s = _clean_time(s, len(x), "s")
        onehot = None
        if self.class_dim:
            onehot = self.onehot(labels)
            if len(onehot) == 1 and len(x) > 1:
                onehot = np.repeat(onehot, len(x), axis=0)
        return self.apply(self.params, x, t, s, onehot)

    def init_from_teacher(self, teacher: "VelocityNet") -> None:
        """Copy teacher weights; the s-embedding input rows start at zero so
        F_student(x, t, s) == F_teacher(x, t) for every s at handoff."""
        if not self.with_s or teacher.with_s:
            raise ValueError("expected an s-conditioned student and a plain teacher")
        if (self.dim_x, self.n_classes, self.hidden_dim, self.n_hidden) != (
            teacher.dim_x,
            teacher.n_classes,
            teacher.hidden_dim,
            teacher.n_hidden,
        ):
            raise ValueError("teacher and student architectures differ")
        temb = 2 * self.n_freqs
        W0_t = teacher.params[0]
        W0_s = np.zeros_like(self.params[0])
        head = self.dim_x + temb
        W0_s[:head] = W0_t[:head]
        W0_s[head + temb :] = W0_t[head:]
        self.params[0] = W0_s
        for i in range(1, len(self.params)):
            self.params[i] = teacher.params[i].copy()


def _clean_time(t, n: int, name: str) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    if len(t) == 1 and n > 1:
        t = np.full(n, t[0])
    if len(t) != n:
        raise ValueError(f"{name} has {len(t)} entries for batch of {n}")
    return t


def eval_F(net: VelocityNet, x, t, s, labels=None) -> np.ndarray:
    """Velocity prediction F(x, t, s, class); deterministic."""
    return net(x, t, s, labels)


def flow_map(net: VelocityNet, x, t, s, labels=None) -> np.ndarray:
    """f(x, t, s) = x + (s - t) F(x, t, s); transports toward data only."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = _clean_time(t, len(x), "t")
    s = _clean_time(s, len(x), "s")
    if np.any(s < t):
        raise ValueError("flow_map requires s >= t")
    return x + (s - t)[:, None] * net(x, t, s, labels)


class EmaShadow:
    """Exponential moving average of a network's weights."""

    def __init__(self, net: VelocityNet, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = [p.copy() for p in net.params]

    def update(self, net: VelocityNet) -> None:
        if len(net.params) != len(self.shadow):
            raise ValueError("shadow and network weight counts differ")
        d = self.decay
        for sh, p in zip(self.shadow, net.params):
            if sh.shape != p.shape:
                raise ValueError("shadow and network weight shapes differ")
            sh *= d
            sh += (1.0 - d) * p

    def as_net(self, net: VelocityNet) -> VelocityNet:
        """Network twin carrying the shadow weights (for evaluation)."""
        twin = net.spawn_like()
        twin.params = [p.copy() for p in self.shadow]
        return twin


def ema_update(ema: EmaShadow, net: VelocityNet) -> EmaShadow:
    ema.update(net)
    return ema


# ---------------------------------------------------------------------------
# checkpoint IO: little-endian, fixed layout, bit-exact round trips
# ---------------------------------------------------------------------------


class CheckpointError(IOError):
    pass


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def save_checkpoint(path, net: VelocityNet, ema: EmaShadow, step: int, digest: bytes = b"") -> None:
    digest = (digest or b"").ljust(32, b"\0")[:32]
    header = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack(
            "<IIIIIIB",
            net.dim_x,
            net.n_classes,
            net.hidden_dim,
            net.n_hidden,
            net.n_freqs,
            net.class_dim,
            1 if net.with_s else 0,
        ),
        struct.pack("<Q", step),
        digest,
        struct.pack("<I", len(net.params)),
    ]
    for p in net.params:
        header.append(struct.pack("<I", p.ndim))
        header.append(struct.pack(f"<{p.ndim}I", *p.shape))
    payload = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params]
    payload += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in ema.shadow]
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(struct.pack("<d", ema.decay))
        fh.write(b"".join(payload))


def load_checkpoint(path):
    """Returns (net, ema, step, digest). Rejects bad magic, version, or size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(
                f"truncated checkpoint reading {what}: expected {off + n} bytes, got {len(blob)}"
            )
        piece = blob[off : off + n]
        off += n
        return piece

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
        )
    dim_x, n_classes, hidden_dim, n_hidden, n_freqs, class_dim, with_s = struct.unpack(
        "<IIIIIIB", take(25, "architecture")
    )
    (step,) = struct.unpack("<Q", take(8, "step"))
    digest = take(32, "config digest")
    (n_params,) = struct.unpack("<I", take(4, "weight count"))
    shapes = []
    for i in range(n_params):
        (ndim,) = struct.unpack("<I", take(4, f"weight {i} ndim"))
        shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim, f"weight {i} shape")))
    (decay,) = struct.unpack("<d", take(8, "ema decay"))

    net = VelocityNet(
        dim_x=dim_x,
        n_classes=n_classes,
        hidden_dim=hidden_dim,
        n_hidden=n_hidden,
        n_freqs=n_freqs,
        class_dim=class_dim or 16,
        with_s=bool(with_s),
    )
    if len(net.params) != n_params:
        raise CheckpointError("weight count does not match declared architecture")
    online = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n, "online weights"), dtype="<f8").reshape(shape)
        online.append(arr.astype(np.float64))
    net.params = online
    ema = EmaShadow(net, decay=decay)
    shadow = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n, "ema weights"), dtype="<f8").reshape(shape)
        shadow.append(arr.astype(np.float64))
    ema.shadow = shadow
    if off != len(blob):
        raise CheckpointError(f"trailing bytes: expected {off}, got {len(blob)}")
    return net, ema, step, digest
