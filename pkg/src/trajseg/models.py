"""Model architectures, candidate matching, the combined loss, decoding.

Two frameworks over the same kinematic inputs:

- trajyolo: backbone (MLP or CNN) flattened into an MLP head that emits
  n_cp_slots change-point coordinates plus (n_cp_slots + 1) x k segment
  class probabilities, all through a sigmoid.
- trajssd: fully convolutional; the trip is reduced to S uniform
  sub-trips of l_uni points each and the head emits k class
  probabilities per sub-trip. Change points are read off where the
  per-sub-trip argmax changes.

The combined loss is a weighted sum of a localization term over matched
change-point candidates and a class term over segments weighted by
their real-point counts; padded points never contribute.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import nn
from .trips import NUM_MODES, N_MAX, PaddedBatch, derive_targets

DEFAULT_LAM_LOC = 300.0
DEFAULT_LAM_CLS = 1.0

# raw kinematics span ~0-80 m/s; unscaled they freeze training under the
# stock schedule, so inputs are normalized by the outlier thresholds
_FEATURE_SCALE = np.array([80.0, 10.0, 10.0])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; see default_spec for the stock layouts."""

    framework: str                       # "trajyolo" | "trajssd"
    backbone: str                        # "mlp" | "cnn" | "cnn3p"
    n_classes: int = NUM_MODES
    n_max: int = N_MAX
    n_cp_slots: int = 2                  # trajyolo candidate count
    conv_channels: tuple[int, ...] = ()
    conv_kernels: tuple[int, ...] = ()
    pool_sizes: tuple[int, ...] = ()
    mlp_layers: tuple[int, ...] = ()     # hidden widths (backbone or head)
    ppp_windows: tuple[int, ...] = ()    # trajssd cnn3p pyramid windows
    head_kernel: int = 1                 # trajssd head conv size
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        allowed = {"trajyolo": {"mlp", "cnn"}, "trajssd": {"cnn", "cnn3p"}}
        if self.framework not in allowed:
            raise ValueError(f"unknown framework {self.framework!r}")
        if self.backbone not in allowed[self.framework]:
            raise ValueError(
                f"backbone {self.backbone!r} not supported for {self.framework}"
            )
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.pool_sizes)):
            raise ValueError("conv channel/kernel/pool lists must align")
        if self.backbone != "mlp" and not self.conv_channels:
            raise ValueError("cnn backbones need at least one conv stage")
        if self.backbone == "mlp" and self.conv_channels:
            raise ValueError("mlp backbone takes no conv stages")
        if any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            raise ValueError("conv kernels must be odd (length-preserving padding)")
        if any(p < 1 for p in self.pool_sizes):
            raise ValueError("pool sizes must be >= 1")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head kernel must be odd")
        if self.n_cp_slots < 1 or self.n_classes < 2 or self.n_max < 1:
            raise ValueError("n_cp_slots >= 1, n_classes >= 2, n_max >= 1 required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def yolo_head_width(self) -> int:
        return self.n_cp_slots + self.n_classes * (self.n_cp_slots + 1)


def default_spec(
    framework: str,
    backbone: str,
    n_cp_slots: int = 2,
    first_pool: int = 2,
    head_kernel: int = 1,
) -> ModelSpec:
    """Stock architectures; first_pool rescales trajssd's sub-trip width."""
    if framework == "trajssd":
        pools = (first_pool, 2, 2, 2)
        l_uni = int(np.prod(pools))
        windows: tuple[int, ...] = ()
        if backbone == "cnn3p":
            s_rows = -(-N_MAX // l_uni)
            windows = (s_rows, 5)
        return ModelSpec(
            framework="trajssd",
            backbone=backbone,
            conv_channels=(64, 128, 256, 512),
            conv_kernels=(3, 3, 7, 7),
            pool_sizes=pools,
            ppp_windows=windows,
            head_kernel=head_kernel,
            n_cp_slots=n_cp_slots,
        )
    if framework == "trajyolo":
        if backbone == "cnn":
            return ModelSpec(
                framework="trajyolo",
                backbone="cnn",
                conv_channels=(64, 128, 256, 512, 1024),
                conv_kernels=(3, 3, 3, 3, 3),
                pool_sizes=(2, 2, 2, 2, 2),
                mlp_layers=(1024, 256),
                n_cp_slots=n_cp_slots,
            )
        return ModelSpec(
            framework="trajyolo",
            backbone="mlp",
            mlp_layers=(64, 128, 256),
            n_cp_slots=n_cp_slots,
        )
    raise ValueError(f"unknown framework {framework!r}")


@dataclass
class Prediction:
    """Per-point class probabilities / labels and predicted change points."""

    pointwise_probs: np.ndarray    # (N, k)
    pointwise_labels: np.ndarray   # (N,)
    cp_indices: np.ndarray         # strictly increasing, in [1, N-1]


class Model:
    """Parameters plus forward pass for one ModelSpec."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self._names: list[str] = []
        self.params: list[nn.Tensor] = []

        in_ch = 3
        for i, (ch, ks) in enumerate(zip(spec.conv_channels, spec.conv_kernels)):
            # trajyolo needs he init: glorot shrinks the signal ~0.58x per
            # relu stage, and through 5 convs + 3 dense layers the head
            # starts with ~0 logits and never recovers under the decaying
            # schedule. The shallower trajssd path trains measurably better
            # from the small-logit glorot start, so it keeps glorot.
            fan_in = in_ch * ks
            if spec.framework == "trajyolo":
                w = nn.he_uniform(rng, (ch, in_ch, ks), fan_in=fan_in)
            else:
                w = nn.glorot_uniform(rng, (ch, in_ch, ks), fan_in=fan_in, fan_out=ch * ks)
            self._add(f"conv{i}.w", w)
            self._add(f"conv{i}.b", np.zeros(ch))
            in_ch = ch

        if spec.framework == "trajssd":
            head_in = in_ch * (len(spec.ppp_windows) + 1)
            self._add(
                "head.w",
                nn.glorot_uniform(
                    rng,
                    (spec.n_classes, head_in, spec.head_kernel),
                    fan_in=head_in * spec.head_kernel,
                    fan_out=spec.n_classes * spec.head_kernel,
                ),
            )
            self._add("head.b", np.zeros(spec.n_classes))
        else:
            width = self._yolo_flat_width()
            for i, hidden in enumerate(spec.mlp_layers):
                self._add(
                    f"fc{i}.w", nn.he_uniform(rng, (width, hidden), fan_in=width)
                )
                self._add(f"fc{i}.b", np.zeros(hidden))
                width = hidden
            out_w = spec.yolo_head_width
            self._add("out.w", nn.glorot_uniform(rng, (width, out_w), width, out_w))
            self._add("out.b", np.zeros(out_w))

    def _add(self, name: str, data: np.ndarray) -> None:
        self._names.append(name)
        self.params.append(nn.Tensor(data))

    def _conv_length(self, length: int) -> int:
        for pool in self.spec.pool_sizes:
            length = length // pool
        return length

    def _yolo_flat_width(self) -> int:
        if self.spec.backbone == "mlp":
            return self.spec.n_max * 3
        return self.spec.conv_channels[-1] * self._conv_length(self.s_rows * self.l_uni)

    @property
    def l_uni(self) -> int:
        """Product of conv strides and pool sizes, by layer introspection."""
        prod = 1
        for _ in self.spec.conv_kernels:
            prod *= 1  # all convs are stride 1
        for pool in self.spec.pool_sizes:
            prod *= pool
        return prod

    @property
    def s_rows(self) -> int:
        return -(-self.spec.n_max // self.l_uni)

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in zip(self._names, self.params)]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _param(self, name: str) -> nn.Tensor:
        return self.params[self._names.index(name)]

    def forward(
        self,
        features: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        lengths: np.ndarray | None = None,
    ) -> nn.Tensor:
        """Run a padded feature batch (B, n_max, 3) through the network.

        Returns sigmoid outputs: (B, head_width) for trajyolo, or
        (B, n_classes, S) for trajssd. When per-trip lengths are given,
        the trajyolo CNN path zeroes feature positions past each trip's
        end before flattening, so the head sees padding as exact zeros
        rather than conv-smeared constants.
        """
        spec = self.spec
        if features.ndim != 3 or features.shape[1] != spec.n_max or features.shape[2] != 3:
            raise ValueError(f"expected features (B, {spec.n_max}, 3)")
        features = features / _FEATURE_SCALE

        if spec.backbone == "mlp":
            x = nn.Tensor(features.reshape(features.shape[0], -1))
            for i in range(len(spec.mlp_layers)):
                x = nn.relu(nn.dense(x, self._param(f"fc{i}.w"), self._param(f"fc{i}.b")))
                if i < 2:
                    x = nn.dropout(x, spec.dropout_rate, training, rng)
            return nn.sigmoid(nn.dense(x, self._param("out.w"), self._param("out.b")))

        chans_last = np.ascontiguousarray(features.transpose(0, 2, 1))
        # pad to whole candidate windows so pooling never truncates a tail
        padded_len = self.s_rows * self.l_uni
        if padded_len > spec.n_max:
            wide = np.zeros(
                (features.shape[0], 3, padded_len), dtype=np.float64
            )
            wide[:, :, : spec.n_max] = chans_last
            chans_last = wide
        x = nn.Tensor(chans_last)
        for i, (ks, pool) in enumerate(zip(spec.conv_kernels, spec.pool_sizes)):
            x = nn.conv1d(
                x, self._param(f"conv{i}.w"), self._param(f"conv{i}.b"), padding=ks // 2
            )
            x = nn.relu(x)
            if pool > 1:
                x = nn.maxpool1d(x, pool)

        if spec.framework == "trajssd":
            if spec.ppp_windows:
                x = nn.ppp(x, spec.ppp_windows)
            x = nn.conv1d(
                x, self._param("head.w"), self._param("head.b"),
                padding=spec.head_kernel // 2,
            )
            return nn.sigmoid(x)

        if lengths is not None:
            l_feat = x.data.shape[2]
            rows = np.minimum(-(-np.asarray(lengths) // self.l_uni), l_feat)
            mask = (np.arange(l_feat) < rows[:, None]).astype(np.float64)
            x = nn.hadamard(x, mask[:, None, :])
        x = nn.flatten(x)
        for i in range(len(spec.mlp_layers)):
            x = nn.relu(nn.dense(x, self._param(f"fc{i}.w"), self._param(f"fc{i}.b")))
            if i < 2:
                x = nn.dropout(x, spec.dropout_rate, training, rng)
        return nn.sigmoid(nn.dense(x, self._param("out.w"), self._param("out.b")))

    def save(self, fp: BinaryIO) -> None:
        """Self-describing checkpoint: spec descriptor plus parameters."""
        nn.save_checkpoint(fp, self.named_params(), {"spec": asdict(self.spec)})

    @classmethod
    def load(cls, fp: BinaryIO) -> "Model":
        meta, named = nn.load_checkpoint(fp)
        raw = meta["spec"]
        spec = ModelSpec(
            **{
                key: tuple(val) if isinstance(val, list) else val
                for key, val in raw.items()
            }
        )
        model = cls(spec, seed=0)
        by_name = dict(named)
        if set(by_name) != set(model._names):
            raise ValueError("checkpoint parameters do not match the spec")
        for name, tensor in zip(model._names, model.params):
            arr = by_name[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data[...] = arr
        return model


def match_yolo(
    cp_indices: np.ndarray, n_cp_slots: int, n_max: int = N_MAX
) -> tuple[np.ndarray, np.ndarray]:
    """Order-based assignment: slot j targets the j-th true change point.

    Returns (targets, matched): targets are coordinates normalized by
    n_max; slots beyond the true count are unmatched and carry 0.
    """
    targets = np.zeros(n_cp_slots, dtype=np.float64)
    matched = np.zeros(n_cp_slots, dtype=bool)
    m = min(len(cp_indices), n_cp_slots)
    targets[:m] = np.asarray(cp_indices[:m], dtype=np.float64) / n_max
    matched[:m] = True
    return targets, matched


def match_ssd(cp_indices: np.ndarray, l_uni: int, n_rows: int) -> np.ndarray:
    """Nearest candidate boundary (multiple of l_uni) per true change point.

    Equidistant cases take the earlier boundary; results are clipped to
    [1, n_rows - 1] so a match is never the trip start.
    """
    idx = np.asarray(cp_indices, dtype=np.int64)
    base = idx // l_uni
    rem = idx - base * l_uni
    cand = base + (2 * rem > l_uni)
    return np.clip(cand, 1, n_rows - 1)


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted components of one batch loss, before normalization."""

    loc: float
    cls: float
    n_real_points: int

    @property
    def total(self) -> float:
        return self.loc + self.cls


def _segment_targets_yolo(
    labels: np.ndarray, n_cp_slots: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot (mode, weight) targets; trailing segments fold into the last slot."""
    _, _, seg_modes, seg_lengths = derive_targets(labels)
    n_slots = n_cp_slots + 1
    n_used = min(len(seg_modes), n_slots)
    modes = seg_modes[:n_used].copy()
    weights = seg_lengths[:n_used].astype(np.float64)
    if len(seg_modes) > n_slots:
        weights[-1] = float(seg_lengths[n_slots - 1 :].sum())
        modes[-1] = seg_modes[-1]
    return modes, weights


def _majority_mode(span: np.ndarray, n_classes: int) -> int:
    """Most frequent mode; ties go to the mode appearing first in the span."""
    counts = np.bincount(span, minlength=n_classes)
    top = counts.max()
    for lab in span:
        if counts[lab] == top:
            return int(lab)
    raise AssertionError("unreachable: span is non-empty")


def unified_loss(
    pred: nn.Tensor,
    batch: PaddedBatch,
    spec: ModelSpec,
    l_uni: int | None = None,
    lam_loc: float = DEFAULT_LAM_LOC,
    lam_cls: float = DEFAULT_LAM_CLS,
) -> tuple[nn.Tensor, LossBreakdown]:
    """Batch loss: lam_loc * localization + lam_cls * length-weighted class error.

    trajyolo: localization over order-matched candidate slots (a trip
    with no change points contributes none), class error per segment
    slot against one-hot targets weighted by true segment length.

    trajssd: class error per real sub-trip against the majority mode,
    weighted by the sub-trip's real point count. The localization term
    (true CP vs nearest candidate boundary) is included in the value but
    is constant in the parameters, so it carries no gradient; pass
    l_uni from the model.
    """
    grad_buf = np.zeros_like(pred.data)
    loc_total = 0.0
    cls_total = 0.0
    n_real = int(batch.lengths.sum())

    if spec.framework == "trajyolo":
        n_slots = spec.n_cp_slots
        width = spec.yolo_head_width
        if pred.data.shape != (len(batch.lengths), width):
            raise ValueError(f"expected trajyolo output (B, {width})")
        for i, n in enumerate(batch.lengths):
            targets, matched = match_yolo(batch.cp_indices[i], n_slots, spec.n_max)
            coords = pred.data[i, :n_slots]
            diff = (coords - targets) * matched
            loc_total += float(np.sum(diff * diff))
            grad_buf[i, :n_slots] += 2.0 * lam_loc * diff

            labels = batch.labels[i, :n]
            modes, weights = _segment_targets_yolo(labels, n_slots)
            rows = pred.data[i, n_slots:].reshape(n_slots + 1, spec.n_classes)
            grad_rows = grad_buf[i, n_slots:].reshape(n_slots + 1, spec.n_classes)
            for s, (mode, w) in enumerate(zip(modes, weights)):
                one_hot = np.zeros(spec.n_classes)
                one_hot[mode] = 1.0
                d = rows[s] - one_hot
                cls_total += w * float(np.sum(d * d))
                grad_rows[s] += 2.0 * lam_cls * w * d
    elif spec.framework == "trajssd":
        if l_uni is None:
            raise ValueError("trajssd loss needs l_uni")
        n_rows_total = pred.data.shape[2]
        if pred.data.shape[1] != spec.n_classes:
            raise ValueError(f"expected trajssd output (B, {spec.n_classes}, S)")
        for i, n in enumerate(batch.lengths):
            n = int(n)
            rows_used = -(-n // l_uni)
            labels = batch.labels[i, :n]
            for r in range(rows_used):
                span = labels[r * l_uni : min((r + 1) * l_uni, n)]
                one_hot = np.zeros(spec.n_classes)
                one_hot[_majority_mode(span, spec.n_classes)] = 1.0
                w = float(len(span))
                d = pred.data[i, :, r] - one_hot
                cls_total += w * float(np.sum(d * d))
                grad_buf[i, :, r] += 2.0 * lam_cls * w * d
            true_cp = batch.cp_indices[i]
            if len(true_cp) > 0:
                cand = match_ssd(true_cp, l_uni, n_rows_total)
                l_true = np.asarray(true_cp, dtype=np.float64) / spec.n_max
                l_cand = cand.astype(np.float64) * l_uni / spec.n_max
                loc_total += float(np.sum((l_true - l_cand) ** 2))
    else:
        raise ValueError(f"unknown framework {spec.framework!r}")

    value = lam_loc * loc_total + lam_cls * cls_total
    result = nn.Tensor(value, parents=(pred,))

    def _backward() -> None:
        pred.grad += result.grad * grad_buf

    result.backward_fn = _backward
    return result, LossBreakdown(
        loc=lam_loc * loc_total, cls=lam_cls * cls_total, n_real_points=n_real
    )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def decode_yolo(
    coords: np.ndarray, class_probs: np.ndarray, n: int, n_max: int = N_MAX
) -> Prediction:
    """Turn head outputs into per-point probabilities for a trip of n points.

    Candidate j maps to index round(coord_j * n_max) clamped up to 1; a
    candidate that lands at or past n, or at or before the previous kept
    candidate, invalidates itself and every later candidate. Kept
    boundaries split [0, n) into segments; segment s broadcasts class
    row s to its points.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    kept: list[int] = []
    for c in np.asarray(coords, dtype=np.float64):
        raw = _round_half_up(c * n_max)
        if raw >= n:
            break
        idx = max(raw, 1)
        if kept and idx <= kept[-1]:
            break
        kept.append(idx)
    bounds = [0] + kept + [n]
    probs = np.empty((n, class_probs.shape[1]), dtype=np.float64)
    for s in range(len(bounds) - 1):
        probs[bounds[s] : bounds[s + 1]] = class_probs[s]
    return Prediction(
        pointwise_probs=probs,
        pointwise_labels=probs.argmax(axis=1),
        cp_indices=np.asarray(kept, dtype=np.int64),
    )


def decode_ssd(class_probs: np.ndarray, n: int, l_uni: int) -> Prediction:
    """Broadcast sub-trip rows (S, k) to points; CPs where the argmax flips."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rows_used = -(-n // l_uni)
    if rows_used > class_probs.shape[0]:
        raise ValueError("trip longer than the decoded row coverage")
    row_of_point = np.arange(n) // l_uni
    probs = class_probs[row_of_point]
    row_labels = class_probs[:rows_used].argmax(axis=1)
    cps = [
        r * l_uni
        for r in range(1, rows_used)
        if row_labels[r] != row_labels[r - 1] and r * l_uni < n
    ]
    return Prediction(
        pointwise_probs=probs,
        pointwise_labels=probs.argmax(axis=1),
        cp_indices=np.asarray(cps, dtype=np.int64),
    )


def predict_batch(
    model: Model, features: np.ndarray, lengths: np.ndarray, chunk: int = 128
) -> list[Prediction]:
    """Forward + decode a padded feature array, chunked to bound memory."""
    preds: list[Prediction] = []
    spec = model.spec
    for start in range(0, len(lengths), chunk):
        with nn.no_grad():
            out = model.forward(
                features[start : start + chunk], training=False,
                lengths=lengths[start : start + chunk],
            ).data
        for row, n in zip(out, lengths[start : start + chunk]):
            n = int(n)
            if spec.framework == "trajyolo":
                n_slots = spec.n_cp_slots
                coords = row[:n_slots]
                rows = row[n_slots:].reshape(n_slots + 1, spec.n_classes)
                preds.append(decode_yolo(coords, rows, n, spec.n_max))
            else:
                preds.append(decode_ssd(row.T, n, model.l_uni))
    return preds
