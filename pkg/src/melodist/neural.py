"""Recurrent sequence-to-sequence models with hand-written backpropagation.

Three model modes share one stacked-LSTM encoder/decoder skeleton:

* ``plain`` reconstructs the input sequence from its feature vector.
* ``transposing`` reconstructs a transposed version of the input, with the
  target transposition given to the decoder as an absolute note label.
* ``invariant`` decodes from the average of two encodings drawn from one
  transposition class and adds an l1 penalty pulling those encodings
  together.

The encoder's last-step output is linearly projected and passed through a
ReLU, so feature vectors are nonnegative with many exact zeros.  All math is
float64 numpy; gradients are exact reverse-mode derivations of the losses,
verified against central finite differences in the test suite.

Checkpoints are a small self-describing binary: magic bytes, a length-prefixed
JSON header (format version, architecture, seed, vocabulary), then the raw
little-endian float64 weight array.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import (
    Corpus,
    TokenSequence,
    Transposition,
    Vocabulary,
    equivalence_class,
    first_sounded_note,
    parse_token,
    transpose,
)
from .errors import (
    CheckpointError,
    ContractViolation,
    MelodistError,
    MissingTransposition,
    OutOfRange,
    OutOfVocabulary,
    ShapeMismatch,
    TrainingDiverged,
)

logger = logging.getLogger(__name__)

MODE_PLAIN = "plain"
MODE_TRANSPOSING = "transposing"
MODE_INVARIANT = "invariant"
MODES = (MODE_PLAIN, MODE_TRANSPOSING, MODE_INVARIANT)

_CHECKPOINT_MAGIC = b"MELODST1"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    """Architecture metadata; the weight layout is a pure function of this."""

    mode: str
    layers: int
    hidden: int
    n_features: int
    alphabet: int
    seq_len: int
    n_labels: int = 0
    label_dim: int = 16
    embed_dim: int = 0  # 0 means "same as hidden"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ShapeMismatch(f"unknown mode {self.mode!r}")
        if min(self.layers, self.hidden, self.n_features, self.alphabet, self.seq_len) < 1:
            raise ShapeMismatch("all architecture dimensions must be >= 1")
        if self.mode != MODE_PLAIN and self.n_labels < 1:
            raise ShapeMismatch(f"{self.mode} mode needs transposition labels")

    @property
    def embed(self) -> int:
        return self.embed_dim or self.hidden

    @property
    def conditioned(self) -> bool:
        return self.mode != MODE_PLAIN

    @property
    def init_width(self) -> int:
        # decoder initial state is projected from the feature vector, with the
        # label embedding concatenated in conditioned modes
        return self.n_features + (self.label_dim if self.conditioned else 0)

    @classmethod
    def for_corpus(
        cls,
        mode: str,
        corpus: Corpus,
        hidden: int = 64,
        n_features: int = 64,
        layers: int = 1,
        label_dim: int = 16,
    ) -> "Arch":
        a = corpus.vocabulary.size
        return cls(
            mode=mode,
            layers=layers,
            hidden=hidden,
            n_features=n_features,
            alphabet=a,
            seq_len=corpus.length,
            n_labels=a if mode != MODE_PLAIN else 0,
            label_dim=label_dim,
        )


def param_layout(arch: Arch) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs defining the flat weight partitioning."""
    h, e, n, a = arch.hidden, arch.embed, arch.n_features, arch.alphabet
    layout: list[tuple[str, tuple[int, ...]]] = [("enc_embed", (a, e))]
    for l in range(arch.layers):
        width = e if l == 0 else h
        layout += [
            (f"enc_l{l}_W", (width, 4 * h)),
            (f"enc_l{l}_U", (h, 4 * h)),
            (f"enc_l{l}_b", (4 * h,)),
        ]
    layout += [("enc_proj_W", (h, n)), ("enc_proj_b", (n,))]
    layout.append(("dec_embed", (a + 1, e)))  # extra row: start-of-sequence
    for l in range(arch.layers):
        width = e if l == 0 else h
        layout += [
            (f"dec_l{l}_W", (width, 4 * h)),
            (f"dec_l{l}_U", (h, 4 * h)),
            (f"dec_l{l}_b", (4 * h,)),
        ]
    z = arch.init_width
    layout += [
        ("dec_init_hW", (z, arch.layers * h)),
        ("dec_init_hb", (arch.layers * h,)),
        ("dec_init_cW", (z, arch.layers * h)),
        ("dec_init_cb", (arch.layers * h,)),
        ("dec_in_W", (z, e)),
    ]
    if arch.conditioned:
        layout.append(("label_embed", (arch.n_labels, arch.label_dim)))
    layout += [("out_W", (h, a)), ("out_zW", (z, a)), ("out_b", (a,))]
    return layout


def weight_count(arch: Arch) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(arch))


class ModelParams:
    """All trainable weights as one flat float64 array plus named views.

    Views share memory with the flat array, so in-place optimizer updates on
    the flat array are immediately visible through every view.
    """

    def __init__(
        self, arch: Arch, vocab: Vocabulary, weights: np.ndarray, init_seed: int = 0
    ) -> None:
        if vocab.size != arch.alphabet:
            raise ShapeMismatch(
                f"vocabulary size {vocab.size} != arch alphabet {arch.alphabet}"
            )
        expected = weight_count(arch)
        if weights.shape != (expected,):
            raise ShapeMismatch(
                f"weight array has {weights.shape}, expected ({expected},)"
            )
        if not np.isfinite(weights).all():
            raise ShapeMismatch("weights contain non-finite values")
        self.arch = arch
        self.vocab = vocab
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.init_seed = init_seed
        self._views = _make_views(arch, self.weights)

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.vocab, self.weights.copy(), self.init_seed)

    @property
    def sos_index(self) -> int:
        return self.arch.alphabet


def _make_views(arch: Arch, flat: np.ndarray) -> dict[str, np.ndarray]:
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in param_layout(arch):
        size = int(np.prod(shape))
        views[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return views


def init_params(arch: Arch, vocab: Vocabulary, seed: int) -> ModelParams:
    """Seeded initialization: matrices uniform in +-1/sqrt(fan_in), biases zero
    except the forget gates, which start at 1 so cell state (and with it the
    conditioning information) survives the full sequence from the start."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(weight_count(arch))
    views = _make_views(arch, flat)
    for name, shape in param_layout(arch):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            views[name][...] = rng.uniform(-bound, bound, size=shape)
    hid = arch.hidden
    for prefix in ("enc", "dec"):
        for l in range(arch.layers):
            views[f"{prefix}_l{l}_b"][hid : 2 * hid] = 1.0
    return ModelParams(arch, vocab, flat, init_seed=seed)


def zero_params(arch: Arch, vocab: Vocabulary) -> ModelParams:
    return ModelParams(arch, vocab, np.zeros(weight_count(arch)))


def with_mode(params: ModelParams, mode: str) -> ModelParams:
    """Reinterpret weights under another mode with the identical layout.

    The transposing and invariant modes share one parameter layout, so a
    model pretrained on labelled transpositions can seed invariance training.
    """
    arch = Arch(**{**asdict(params.arch), "mode": mode})
    if param_layout(arch) != param_layout(params.arch):
        raise ShapeMismatch(f"modes {params.arch.mode!r} and {mode!r} differ in layout")
    return ModelParams(arch, params.vocab, params.weights.copy(), params.init_seed)


# --- forward / backward machinery --------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _StackCache:
    """Per-step tensors one stacked-LSTM run must keep for its backward pass."""

    __slots__ = ("inputs", "h_prev", "c_prev", "i", "f", "g", "o", "c", "tc", "h_top")

    def __init__(self, layers: int, steps: int) -> None:
        self.inputs = [[None] * steps for _ in range(layers)]
        self.h_prev = [[None] * steps for _ in range(layers)]
        self.c_prev = [[None] * steps for _ in range(layers)]
        self.i = [[None] * steps for _ in range(layers)]
        self.f = [[None] * steps for _ in range(layers)]
        self.g = [[None] * steps for _ in range(layers)]
        self.o = [[None] * steps for _ in range(layers)]
        self.c = [[None] * steps for _ in range(layers)]
        self.tc = [[None] * steps for _ in range(layers)]
        self.h_top: list[np.ndarray] = [None] * steps  # type: ignore[list-item]


def _stack_step(
    params: ModelParams,
    prefix: str,
    x: np.ndarray,
    h: list[np.ndarray],
    c: list[np.ndarray],
    cache: _StackCache | None,
    t: int,
) -> np.ndarray:
    """Advance every layer one time step in place; returns the top hidden state."""
    for l in range(params.arch.layers):
        w = params.view(f"{prefix}_l{l}_W")
        u = params.view(f"{prefix}_l{l}_U")
        b = params.view(f"{prefix}_l{l}_b")
        pre = x @ w + h[l] @ u + b
        hid = params.arch.hidden
        gi = _sigmoid(pre[:, :hid])
        gf = _sigmoid(pre[:, hid : 2 * hid])
        gg = np.tanh(pre[:, 2 * hid : 3 * hid])
        go = _sigmoid(pre[:, 3 * hid :])
        c_new = gf * c[l] + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        if cache is not None:
            cache.inputs[l][t] = x
            cache.h_prev[l][t] = h[l]
            cache.c_prev[l][t] = c[l]
            cache.i[l][t], cache.f[l][t] = gi, gf
            cache.g[l][t], cache.o[l][t] = gg, go
            cache.c[l][t], cache.tc[l][t] = c_new, tc
        h[l], c[l] = h_new, c_new
        x = h_new
    if cache is not None:
        cache.h_top[t] = x
    return x


def _stack_backward(
    params: ModelParams,
    prefix: str,
    cache: _StackCache,
    d_htop: list[np.ndarray | None],
    grads: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through time and layers.

    ``d_htop[t]`` is the loss gradient arriving at the top hidden state of
    step t (None where nothing arrives).  Returns the gradient w.r.t. the
    layer-0 inputs, stacked as (steps, batch, embed), plus the gradients
    w.r.t. the initial hidden and cell states, each (layers, batch, hidden).
    """
    arch = params.arch
    steps = len(cache.h_top)
    batch = cache.h_top[0].shape[0]
    dh_time = [np.zeros((batch, arch.hidden)) for _ in range(arch.layers)]
    dc_time = [np.zeros((batch, arch.hidden)) for _ in range(arch.layers)]
    d_inputs = np.zeros((steps, batch, arch.embed))
    for t in reversed(range(steps)):
        dh_above = d_htop[t] if d_htop[t] is not None else 0.0
        for l in reversed(range(arch.layers)):
            dh = dh_time[l] + dh_above
            gi, gf = cache.i[l][t], cache.f[l][t]
            gg, go = cache.g[l][t], cache.o[l][t]
            tc = cache.tc[l][t]
            dgo = dh * tc
            dc = dc_time[l] + dh * go * (1.0 - tc * tc)
            dgi = dc * gg
            dgf = dc * cache.c_prev[l][t]
            dgg = dc * gi
            dc_time[l] = dc * gf
            da = np.concatenate(
                [
                    dgi * gi * (1.0 - gi),
                    dgf * gf * (1.0 - gf),
                    dgg * (1.0 - gg * gg),
                    dgo * go * (1.0 - go),
                ],
                axis=1,
            )
            x = cache.inputs[l][t]
            grads[f"{prefix}_l{l}_W"] += x.T @ da
            grads[f"{prefix}_l{l}_U"] += cache.h_prev[l][t].T @ da
            grads[f"{prefix}_l{l}_b"] += da.sum(axis=0)
            dh_time[l] = da @ params.view(f"{prefix}_l{l}_U").T
            dh_above = da @ params.view(f"{prefix}_l{l}_W").T
        d_inputs[t] = dh_above
    dh0 = np.stack(dh_time)
    dc0 = np.stack(dc_time)
    return d_inputs, dh0, dc0


def _encode_forward(
    params: ModelParams, idx: np.ndarray, want_cache: bool
) -> tuple[np.ndarray, dict | None]:
    arch = params.arch
    batch, steps = idx.shape
    emb = params.view("enc_embed")[idx]  # (batch, steps, embed)
    h = [np.zeros((batch, arch.hidden)) for _ in range(arch.layers)]
    c = [np.zeros((batch, arch.hidden)) for _ in range(arch.layers)]
    cache = _StackCache(arch.layers, steps) if want_cache else None
    top = None
    for t in range(steps):
        top = _stack_step(params, "enc", emb[:, t], h, c, cache, t)
    pre = top @ params.view("enc_proj_W") + params.view("enc_proj_b")
    feat = np.maximum(pre, 0.0)
    ctx = {"idx": idx, "cache": cache, "pre": pre, "h_last": top} if want_cache else None
    return feat, ctx


def _encode_backward(
    params: ModelParams, ctx: dict, d_feat: np.ndarray, grads: dict[str, np.ndarray]
) -> None:
    cache: _StackCache = ctx["cache"]
    steps = len(cache.h_top)
    d_pre = d_feat * (ctx["pre"] > 0.0)
    grads["enc_proj_W"] += ctx["h_last"].T @ d_pre
    grads["enc_proj_b"] += d_pre.sum(axis=0)
    d_htop: list[np.ndarray | None] = [None] * steps
    d_htop[-1] = d_pre @ params.view("enc_proj_W").T
    d_inputs, _, _ = _stack_backward(params, "enc", cache, d_htop, grads)
    idx = ctx["idx"]
    flat = d_inputs.transpose(1, 0, 2).reshape(-1, params.arch.embed)
    np.add.at(grads["enc_embed"], idx.reshape(-1), flat)


def _decoder_init(
    params: ModelParams, z: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    arch = params.arch
    batch = z.shape[0]
    h_flat = z @ params.view("dec_init_hW") + params.view("dec_init_hb")
    c_flat = z @ params.view("dec_init_cW") + params.view("dec_init_cb")
    h = [h_flat[:, l * arch.hidden : (l + 1) * arch.hidden].copy() for l in range(arch.layers)]
    c = [c_flat[:, l * arch.hidden : (l + 1) * arch.hidden].copy() for l in range(arch.layers)]
    return h, c


def _decode_forward(
    params: ModelParams,
    z: np.ndarray,
    target_idx: np.ndarray | None,
    teacher_forcing: bool,
    want_cache: bool,
) -> tuple[np.ndarray, dict | None]:
    """Run the decoder for seq_len steps; returns probabilities (steps, B, A).

    The conditioning vector z seeds the initial hidden and cell states and is
    also projected into every step's input, so greedy rollouts stay anchored
    to the feature vector instead of drifting with their own prefix.  With
    teacher forcing the input token at step t is the target token at t-1
    (start symbol at t=0); otherwise each step feeds back its own argmax.
    """
    arch = params.arch
    batch = z.shape[0]
    steps = arch.seq_len
    h, c = _decoder_init(params, z)
    z_in = z @ params.view("dec_in_W")
    z_out = z @ params.view("out_zW")
    dec_embed = params.view("dec_embed")
    out_w, out_b = params.view("out_W"), params.view("out_b")
    cache = _StackCache(arch.layers, steps) if want_cache else None
    inputs_used = np.empty((batch, steps), dtype=np.int64)
    probs = np.empty((steps, batch, arch.alphabet))
    current = np.full(batch, params.sos_index, dtype=np.int64)
    for t in range(steps):
        inputs_used[:, t] = current
        top = _stack_step(params, "dec", dec_embed[current] + z_in, h, c, cache, t)
        logits = top @ out_w + z_out + out_b
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        probs[t] = logits
        if teacher_forcing:
            if target_idx is None:
                raise ContractViolation("teacher forcing requires a target sequence")
            current = target_idx[:, t]
        else:
            current = probs[t].argmax(axis=1)
    ctx = {"cache": cache, "inputs": inputs_used, "probs": probs, "z": z} if want_cache else None
    return probs, ctx


def _decode_backward(
    params: ModelParams,
    ctx: dict,
    target_idx: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Backward pass of sum-over-time, mean-over-batch cross-entropy.

    Returns the gradient w.r.t. the decoder conditioning vector z.
    """
    arch = params.arch
    cache: _StackCache = ctx["cache"]
    probs = ctx["probs"]
    steps, batch, _ = probs.shape
    d_htop: list[np.ndarray | None] = [None] * steps
    out_w = params.view("out_W")
    d_logits_total = np.zeros((batch, arch.alphabet))
    for t in range(steps):
        d_logits = probs[t].copy()
        d_logits[np.arange(batch), target_idx[:, t]] -= 1.0
        d_logits /= batch
        grads["out_W"] += cache.h_top[t].T @ d_logits
        grads["out_b"] += d_logits.sum(axis=0)
        d_logits_total += d_logits
        d_htop[t] = d_logits @ out_w.T
    d_inputs, dh0, dc0 = _stack_backward(params, "dec", cache, d_htop, grads)
    flat = d_inputs.transpose(1, 0, 2).reshape(-1, arch.embed)
    np.add.at(grads["dec_embed"], ctx["inputs"].reshape(-1), flat)
    dh0_flat = dh0.transpose(1, 0, 2).reshape(batch, arch.layers * arch.hidden)
    dc0_flat = dc0.transpose(1, 0, 2).reshape(batch, arch.layers * arch.hidden)
    z = ctx["z"]
    grads["dec_init_hW"] += z.T @ dh0_flat
    grads["dec_init_hb"] += dh0_flat.sum(axis=0)
    grads["dec_init_cW"] += z.T @ dc0_flat
    grads["dec_init_cb"] += dc0_flat.sum(axis=0)
    d_zin = d_inputs.sum(axis=0)  # the same projected vector fed every step
    grads["dec_in_W"] += z.T @ d_zin
    grads["out_zW"] += z.T @ d_logits_total
    return (
        dh0_flat @ params.view("dec_init_hW").T
        + dc0_flat @ params.view("dec_init_cW").T
        + d_zin @ params.view("dec_in_W").T
        + d_logits_total @ params.view("out_zW").T
    )


def _cross_entropy(probs: np.ndarray, target_idx: np.ndarray) -> float:
    """Sum over time, mean over batch, of -log p(target)."""
    steps, batch, _ = probs.shape
    picked = probs[np.arange(steps)[:, None], np.arange(batch)[None, :], target_idx.T]
    return float(-np.log(np.maximum(picked, 1e-300)).sum() / batch)


# --- public model surface -----------------------------------------------------


def _sequence_indices(params: ModelParams, seq: TokenSequence) -> np.ndarray:
    if len(seq) != params.arch.seq_len:
        raise ShapeMismatch(
            f"sequence length {len(seq)} != model length {params.arch.seq_len}"
        )
    return params.vocab.indices(seq)


def _batch_indices(params: ModelParams, seqs: Sequence[TokenSequence]) -> np.ndarray:
    if not seqs:
        raise ShapeMismatch("batch is empty")
    return np.stack([_sequence_indices(params, s) for s in seqs])


def encode(params: ModelParams, seq: TokenSequence) -> np.ndarray:
    """Nonnegative feature vector of one sequence (ReLU of the projected
    last-step encoder output)."""
    feat, _ = _encode_forward(params, _batch_indices(params, [seq]), want_cache=False)
    return feat[0]


def encode_batch(params: ModelParams, seqs: Sequence[TokenSequence]) -> np.ndarray:
    feat, _ = _encode_forward(params, _batch_indices(params, seqs), want_cache=False)
    return feat


def averaged_encoding(
    params: ModelParams, seq: TokenSequence, seq_t: TokenSequence
) -> np.ndarray:
    """Mean of the encodings of two sequences from one transposition class.

    Each sequence goes through the single-sequence encode path, so averaging
    a sequence with itself returns its encoding bit-exactly.
    """
    return 0.5 * (encode(params, seq) + encode(params, seq_t))


def _label_index(params: ModelParams, transposition: Transposition) -> int:
    idx = params.vocab.index(transposition.absolute_label)
    if idx >= params.arch.n_labels:
        raise ShapeMismatch("label index outside the label embedding")
    return idx


def _conditioning(
    params: ModelParams, feat: np.ndarray, label_idx: np.ndarray | None
) -> np.ndarray:
    if params.arch.conditioned:
        assert label_idx is not None
        return np.concatenate([feat, params.view("label_embed")[label_idx]], axis=1)
    return feat


def decode(
    params: ModelParams,
    feature: np.ndarray,
    transposition: Transposition | None = None,
    target: TokenSequence | None = None,
) -> np.ndarray:
    """Per-step categorical distributions (seq_len rows of alphabet probs).

    Conditioned modes require the transposition's absolute label; plain mode
    forbids it.  With a target the decoder is teacher-forced, otherwise it
    feeds back its own greedy choices.
    """
    arch = params.arch
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (arch.n_features,):
        raise ShapeMismatch(
            f"feature vector has shape {feature.shape}, expected ({arch.n_features},)"
        )
    if arch.conditioned and transposition is None:
        raise MissingTransposition(f"{arch.mode} mode requires a transposition label")
    if not arch.conditioned and transposition is not None:
        raise MissingTransposition("plain mode takes no transposition label")
    label = (
        np.array([_label_index(params, transposition)])
        if transposition is not None
        else None
    )
    target_idx = (
        _batch_indices(params, [target]) if target is not None else None
    )
    z = _conditioning(params, feature[None, :], label)
    probs, _ = _decode_forward(
        params, z, target_idx, teacher_forcing=target is not None, want_cache=False
    )
    return probs[:, 0, :]


def greedy_decode(
    params: ModelParams,
    feature: np.ndarray,
    transposition: Transposition | None = None,
) -> TokenSequence:
    """Greedy argmax decoding of a feature vector back to tokens."""
    probs = decode(params, feature, transposition)
    return tuple(params.vocab.token(int(i)) for i in probs.argmax(axis=1))


def reconstruction_accuracy(
    params: ModelParams, seqs: Sequence[TokenSequence], batch_size: int = 128
) -> float:
    """Fraction of token positions reproduced by greedy decoding (plain mode)."""
    if params.arch.mode != MODE_PLAIN:
        raise ContractViolation("reconstruction accuracy is defined for plain mode")
    correct = 0
    total = 0
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        idx = _batch_indices(params, chunk)
        feat, _ = _encode_forward(params, idx, want_cache=False)
        probs, _ = _decode_forward(
            params, feat, None, teacher_forcing=False, want_cache=False
        )
        predicted = probs.argmax(axis=2).T  # (batch, steps)
        correct += int((predicted == idx).sum())
        total += idx.size
    return correct / total


# --- losses and gradients -----------------------------------------------------


def _prepare_plain(params: ModelParams, batch: Sequence[TokenSequence]) -> dict:
    idx = _batch_indices(params, batch)
    return {"src": idx, "tgt": idx, "label": None, "src2": None}


def _prepare_transposing(
    params: ModelParams,
    batch: Sequence[tuple[TokenSequence, Transposition, TokenSequence]],
) -> dict:
    sources, labels, targets = [], [], []
    for seq, trans, transformed in batch:
        expected = transpose(seq, trans.semitones)
        if expected != transformed:
            raise ContractViolation(
                f"transposed sequence does not match a {trans.semitones}-semitone shift"
            )
        if first_sounded_note(transformed) != trans.absolute_label:
            raise ContractViolation("absolute label disagrees with the shifted sequence")
        sources.append(seq)
        targets.append(transformed)
        labels.append(_label_index(params, trans))
    return {
        "src": _batch_indices(params, sources),
        "tgt": _batch_indices(params, targets),
        "label": np.array(labels, dtype=np.int64),
        "src2": None,
    }


def _prepare_invariant(
    params: ModelParams,
    batch: Sequence[tuple[TokenSequence, Transposition, Transposition]],
) -> dict:
    sources, shifted, labels, targets = [], [], [], []
    for seq, trans_a, trans_b in batch:
        try:
            seq_a = transpose(seq, trans_a.semitones, params.vocab)
            seq_b = transpose(seq, trans_b.semitones, params.vocab)
        except (OutOfRange, OutOfVocabulary) as exc:
            raise ContractViolation(f"invalid transposition for this model: {exc}")
        if first_sounded_note(seq_a) != trans_a.absolute_label:
            raise ContractViolation("first label disagrees with its shifted sequence")
        if first_sounded_note(seq_b) != trans_b.absolute_label:
            raise ContractViolation("second label disagrees with its shifted sequence")
        sources.append(seq)
        shifted.append(seq_a)
        labels.append(_label_index(params, trans_b))
        targets.append(seq_b)
    return {
        "src": _batch_indices(params, sources),
        "src2": _batch_indices(params, shifted),
        "tgt": _batch_indices(params, targets),
        "label": np.array(labels, dtype=np.int64),
    }


def _run(
    params: ModelParams,
    prepared: dict,
    l1_weight: float,
    teacher_forcing: bool,
    want_grad: bool,
) -> tuple[float, np.ndarray | None, float]:
    """Shared forward (and optional backward) for all three losses.

    Returns (loss, flat gradient or None, mean l1 gap).  The l1 gap is the
    unweighted mean over the batch of ||enc(s) - enc(t.s)||_1; it is zero for
    the unregularized modes.
    """
    arch = params.arch
    batch = prepared["src"].shape[0]
    feat1, ctx1 = _encode_forward(params, prepared["src"], want_cache=want_grad)
    l1_gap = 0.0
    if prepared["src2"] is not None:
        feat2, ctx2 = _encode_forward(params, prepared["src2"], want_cache=want_grad)
        diff = feat1 - feat2
        l1_gap = float(np.abs(diff).sum() / batch)
        feat = 0.5 * (feat1 + feat2)
    else:
        feat = feat1
    z = _conditioning(params, feat, prepared["label"])
    probs, dctx = _decode_forward(
        params, z, prepared["tgt"], teacher_forcing, want_cache=want_grad
    )
    loss = _cross_entropy(probs, prepared["tgt"]) + l1_weight * l1_gap
    if not want_grad:
        return loss, None, l1_gap

    grads_flat = np.zeros_like(params.weights)
    grads = _make_views(arch, grads_flat)
    dz = _decode_backward(params, dctx, prepared["tgt"], grads)
    d_feat = dz[:, : arch.n_features]
    if prepared["label"] is not None:
        np.add.at(grads["label_embed"], prepared["label"], dz[:, arch.n_features :])
    if prepared["src2"] is not None:
        d_sign = np.sign(diff) * (l1_weight / batch)
        _encode_backward(params, ctx1, 0.5 * d_feat + d_sign, grads)
        _encode_backward(params, ctx2, 0.5 * d_feat - d_sign, grads)
    else:
        _encode_backward(params, ctx1, d_feat, grads)
    return loss, grads_flat, l1_gap


def _require_mode(params: ModelParams, mode: str, what: str) -> None:
    if params.arch.mode != mode:
        raise ContractViolation(f"{what} requires a {mode}-mode model")


def loss_ae(params: ModelParams, batch: Sequence[TokenSequence]) -> float:
    """Reconstruction cross-entropy: sum over time, mean over the batch."""
    _require_mode(params, MODE_PLAIN, "loss_ae")
    loss, _, _ = _run(params, _prepare_plain(params, batch), 0.0, True, False)
    return loss


def loss_transposing(
    params: ModelParams,
    batch: Sequence[tuple[TokenSequence, Transposition, TokenSequence]],
) -> float:
    """Cross-entropy of decoding a labelled transposition from enc(s)."""
    _require_mode(params, MODE_TRANSPOSING, "loss_transposing")
    loss, _, _ = _run(params, _prepare_transposing(params, batch), 0.0, True, False)
    return loss


def loss_invariant(
    params: ModelParams,
    batch: Sequence[tuple[TokenSequence, Transposition, Transposition]],
    l1_weight: float,
) -> float:
    """Averaged-encoding reconstruction plus the weighted l1 invariance gap."""
    _require_mode(params, MODE_INVARIANT, "loss_invariant")
    if l1_weight < 0:
        raise ContractViolation("l1 weight must be nonnegative")
    loss, _, _ = _run(params, _prepare_invariant(params, batch), l1_weight, True, False)
    return loss


def grad(
    params: ModelParams, loss_kind: str, batch, l1_weight: float = 0.0
) -> np.ndarray:
    """Exact reverse-mode gradient of the named loss, flat like the weights."""
    _, gradient, _ = value_and_grad(params, loss_kind, batch, l1_weight)
    return gradient


def value_and_grad(
    params: ModelParams,
    loss_kind: str,
    batch,
    l1_weight: float = 0.0,
    teacher_forcing: bool = True,
) -> tuple[float, np.ndarray, float]:
    """(loss, gradient, mean l1 gap) for the loss named by the model mode."""
    if loss_kind == MODE_PLAIN:
        _require_mode(params, MODE_PLAIN, "plain loss")
        prepared = _prepare_plain(params, batch)
    elif loss_kind == MODE_TRANSPOSING:
        _require_mode(params, MODE_TRANSPOSING, "transposing loss")
        prepared = _prepare_transposing(params, batch)
    elif loss_kind == MODE_INVARIANT:
        _require_mode(params, MODE_INVARIANT, "invariant loss")
        prepared = _prepare_invariant(params, batch)
    else:
        raise ContractViolation(f"unknown loss kind {loss_kind!r}")
    loss, gradient, l1_gap = _run(params, prepared, l1_weight, teacher_forcing, True)
    assert gradient is not None
    return loss, gradient, l1_gap


# --- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    """Everything the training loop needs; all randomness flows from `seed`."""

    epochs: int
    batch_size: int = 16
    learning_rate: float = 1e-3
    l1_weight: float = 1.0
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.l1_weight < 0:
            raise ContractViolation("learning_rate must be > 0 and l1_weight >= 0")


class _Adam:
    """Adam with the usual bias correction (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, size: int, learning_rate: float) -> None:
        self.lr = learning_rate
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, weights: np.ndarray, gradient: np.ndarray) -> None:
        self.t += 1
        self.m += (gradient - self.m) * 0.1
        self.v += (gradient * gradient - self.v) * 0.001
        m_hat = self.m / (1.0 - 0.9**self.t)
        v_hat = self.v / (1.0 - 0.999**self.t)
        weights -= self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def _class_table(
    corpus: Corpus, vocab: Vocabulary
) -> list[list[tuple[Transposition, TokenSequence]]]:
    return [equivalence_class(seq, corpus) for seq in corpus.sequences]


def train(
    config: TrainingConfig,
    corpus: Corpus,
    mode: str,
    arch: Arch | None = None,
    log_path: str | Path | None = None,
    initial: ModelParams | None = None,
) -> ModelParams:
    """Seeded mini-batch Adam training; deterministic given (config, corpus).

    Starts from a fresh seeded initialization unless `initial` provides warm
    weights (e.g. to follow teacher-forced epochs with free-running ones).
    Conditioned modes resample the transpositions of every sequence uniformly
    from its equivalence class each epoch.  Per-epoch mean loss and mean l1
    gap go to the log (CSV ``epoch,loss,l1_term``) when a path is given.
    """
    if mode not in MODES:
        raise ContractViolation(f"unknown mode {mode!r}")
    if arch is None:
        arch = Arch.for_corpus(mode, corpus)
    elif arch.mode != mode:
        raise ContractViolation("architecture mode disagrees with requested mode")
    if initial is not None:
        if initial.arch != arch:
            raise ContractViolation("warm-start weights built for another architecture")
        params = initial.copy()
    else:
        params = init_params(arch, corpus.vocabulary, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    optimizer = _Adam(params.weights.size, config.learning_rate)
    classes = _class_table(corpus, corpus.vocabulary) if arch.conditioned else None
    history: list[tuple[int, float, float]] = []
    count = len(corpus.sequences)
    for epoch in range(config.epochs):
        order = rng.permutation(count)
        epoch_loss = 0.0
        epoch_l1 = 0.0
        for start in range(0, count, config.batch_size):
            chosen = order[start : start + config.batch_size]
            batch = _assemble_batch(params, corpus, classes, chosen, mode, rng)
            loss, gradient, l1_gap = _run(
                params,
                batch,
                config.l1_weight if mode == MODE_INVARIANT else 0.0,
                config.teacher_forcing,
                want_grad=True,
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch {start // config.batch_size}"
                )
            optimizer.update(params.weights, gradient)
            epoch_loss += loss * len(chosen)
            epoch_l1 += l1_gap * len(chosen)
        history.append((epoch, epoch_loss / count, epoch_l1 / count))
        logger.info(
            "epoch %d: loss=%.6f l1_term=%.6f", epoch, epoch_loss / count, epoch_l1 / count
        )
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "l1_term"])
            for row in history:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return params


def _assemble_batch(
    params: ModelParams,
    corpus: Corpus,
    classes: list[list[tuple[Transposition, TokenSequence]]] | None,
    chosen: np.ndarray,
    mode: str,
    rng: np.random.Generator,
) -> dict:
    if mode == MODE_PLAIN:
        idx = np.stack([params.vocab.indices(corpus.sequences[i]) for i in chosen])
        return {"src": idx, "tgt": idx, "label": None, "src2": None}
    assert classes is not None
    if mode == MODE_TRANSPOSING:
        sources, labels, targets = [], [], []
        for i in chosen:
            members = classes[i]
            trans, shifted = members[rng.integers(len(members))]
            sources.append(corpus.sequences[i])
            labels.append(params.vocab.index(trans.absolute_label))
            targets.append(shifted)
        return {
            "src": np.stack([params.vocab.indices(s) for s in sources]),
            "tgt": np.stack([params.vocab.indices(s) for s in targets]),
            "label": np.array(labels, dtype=np.int64),
            "src2": None,
        }
    sources, shifted_a, labels, targets = [], [], [], []
    for i in chosen:
        members = classes[i]
        trans_a, seq_a = members[rng.integers(len(members))]
        trans_b, seq_b = members[rng.integers(len(members))]
        sources.append(corpus.sequences[i])
        shifted_a.append(seq_a)
        labels.append(params.vocab.index(trans_b.absolute_label))
        targets.append(seq_b)
    return {
        "src": np.stack([params.vocab.indices(s) for s in sources]),
        "src2": np.stack([params.vocab.indices(s) for s in shifted_a]),
        "tgt": np.stack([params.vocab.indices(s) for s in targets]),
        "label": np.array(labels, dtype=np.int64),
    }


# --- checkpoints -----------------------------------------------------------------


def save_model(params: ModelParams, path: str | Path) -> None:
    """Write magic, length-prefixed JSON header, then raw little-endian f64."""
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "seed": params.init_seed,
        "vocabulary": [str(t) for t in params.vocab.tokens],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.weights.astype("<f8").tobytes())


def load_model(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < len(_CHECKPOINT_MAGIC) + 4 or not raw.startswith(_CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic bytes)")
    offset = len(_CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) < offset + header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {exc}")
    if header.get("format_version") != _CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('format_version')!r}"
        )
    offset += header_len
    try:
        arch = Arch(**header["arch"])
        vocab = Vocabulary.from_ordered([parse_token(t) for t in header["vocabulary"]])
    except (KeyError, TypeError, MelodistError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint header: {exc}")
    body = raw[offset:]
    expected = weight_count(arch) * 8
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: weight payload is {len(body)} bytes, expected {expected}"
        )
    weights = np.frombuffer(body, dtype="<f8").astype(np.float64)
    try:
        return ModelParams(arch, vocab, weights, init_seed=header["seed"])
    except ShapeMismatch as exc:
        raise CheckpointError(f"{path}: {exc}")
