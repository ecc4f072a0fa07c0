"""Basic, single-condition and multi-condition report generators.

Decoding follows the same skeleton in every mode: an LSTM over the previous
word produces ``h_t``, which queries the current image features ``V``. The
conditional modes additionally query the bank of feature differences
``V - V_c`` and the bank of encoded conditional reports, and the four
resulting vectors are concatenated before the vocabulary projection. The
multi-condition mode scales each conditional report by a learned gate in
(0, 1) computed from both images.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from . import numerics as nx
from .corpus import BOS, EOS, PAD
from .layers import (AttentionBank, BiLstmEncoder, ConvEncoder, Embedding, LstmCell, Module,
                     MultiHeadAttention, scaled_normal_init)
from .numerics import DimensionError, NonFiniteError, Tensor, UsageError
from .optim import Adam

__all__ = [
    "MODES",
    "VARIANTS",
    "ModelConfig",
    "Batch",
    "Context",
    "DecodeTrace",
    "DeltaNetModel",
    "delta_features",
    "assemble_banks",
    "train_step",
    "export_trace",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("basic", "delta1", "deltaL")
# conditional feature variants: which conditional banks feed the decoder
VARIANTS = ("full", "image", "report", "image_report")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    positions: int = 16
    heads: int = 4
    max_conditions: int = 3
    cond_len: int = 40
    max_decode_len: int = 60
    mode: str = "delta1"
    seed: int = 0
    image_size: int = 32
    in_channels: int = 1
    conv_channels: tuple = (8, 16, 16)
    encoder_layers: int = 2
    variant: str = "full"
    gate_bias: str = "shared"  # "shared" | "per_index"
    pin_gate: float | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.gate_bias not in ("shared", "per_index"):
            raise ValueError("gate_bias must be 'shared' or 'per_index'")
        for name in ("vocab_size", "dim", "positions", "heads", "cond_len", "max_decode_len",
                     "image_size", "in_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mode != "basic" and self.max_conditions < 1:
            raise ValueError("conditional modes need max_conditions >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def conditional(self) -> bool:
        return self.mode != "basic"

    @property
    def n_conditions(self) -> int:
        return {"basic": 0, "delta1": 1, "deltaL": self.max_conditions}[self.mode]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Batch:
    images: np.ndarray  # (B, C, H, W)
    targets: np.ndarray  # (B, T) BOS ... EOS PAD
    target_mask: np.ndarray  # (B, T)
    cond_images: np.ndarray | None = None  # (B, L, C, H, W)
    cond_reports: np.ndarray | None = None  # (B, L, N_c)
    cond_mask: np.ndarray | None = None  # (B, L, N_c)

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class Context:
    """Encoded inputs for one batch, with banks projected for attention."""

    V: Tensor
    visual: AttentionBank
    delta: AttentionBank | None = None
    text: AttentionBank | None = None
    delta_rows: Tensor | None = None
    text_rows: Tensor | None = None
    text_mask: np.ndarray | None = None
    delta_mask: np.ndarray | None = None
    gates: list = field(default_factory=list)
    n_conditions: int = 0


@dataclass
class DecodeTrace:
    tokens: list = field(default_factory=list)
    logprobs: list = field(default_factory=list)
    weights: list = field(default_factory=list)  # per step: {bank: (H, M) array}
    positions: int = 0
    cond_len: int = 0
    n_conditions: int = 0


def delta_features(V: Tensor, V_c: Tensor) -> Tensor:
    """Visual change between the current and a conditional image, ``V - V_c``."""
    if V.shape != V_c.shape:
        raise DimensionError(f"delta_features: shapes {V.shape} and {V_c.shape} differ")
    return nx.sub(V, V_c)


def assemble_banks(deltas: Sequence[Tensor], texts: Sequence[Tensor], masks=None):
    """Row-wise stacks of per-condition visual and (already gated) text features.

    Returns ``(delta_bank, text_bank, mask)``; either bank is ``None`` when its
    list is empty. ``mask`` concatenates the per-condition padding masks along
    the row axis, aligned with the text bank.
    """
    if not deltas and not texts:
        raise UsageError("assemble_banks needs at least one condition")
    delta_bank = nx.concat_rows(list(deltas)) if deltas else None
    text_bank = nx.concat_rows(list(texts)) if texts else None
    mask = None
    if texts:
        if masks is None:
            masks = [np.ones(t.shape[:-1], dtype=bool) for t in texts]
        mask = np.concatenate([np.asarray(m, dtype=bool) for m in masks], axis=-1)
        if mask.shape != text_bank.shape[:-1]:
            raise DimensionError(f"mask shape {mask.shape} does not match text bank {text_bank.shape}")
    return delta_bank, text_bank, mask


class DeltaNetModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        D = cfg.dim
        self.visual_encoder = ConvEncoder(cfg.in_channels, cfg.image_size, cfg.positions, D, rng,
                                          channels=cfg.conv_channels)
        self.embed = Embedding(cfg.vocab_size, D, rng, pad_id=PAD)
        self.decoder = LstmCell(D, D, rng)
        self.attn_visual = MultiHeadAttention(D, cfg.heads, rng)
        if cfg.conditional:
            self.report_encoder = BiLstmEncoder(D, rng, n_layers=cfg.encoder_layers)
            self.attn_delta = MultiHeadAttention(D, cfg.heads, rng)
            self.attn_text = MultiHeadAttention(D, cfg.heads, rng)
        width = (4 if cfg.conditional else 2) * D
        self.w_p = scaled_normal_init(rng, (width, cfg.vocab_size), width)
        if self.w_p.shape != (width, cfg.vocab_size):
            raise AssertionError("output projection has the wrong shape")
        if cfg.mode == "deltaL":
            # created last so every other tensor matches a delta1 model with the same seed
            self.gate_w_v = scaled_normal_init(rng, (D, 1), D)
            self.gate_w_c = scaled_normal_init(rng, (D, 1), D)
            n_bias = 1 if cfg.gate_bias == "shared" else cfg.max_conditions
            self.gate_b = nx.parameter(np.zeros(n_bias))
        if cfg.dtype == "float32":
            for p in self.parameters().values():
                p.data = p.data.astype(np.float32)
                p.grad = np.zeros_like(p.data)
        self._params = self.parameters()

    @property
    def dtype(self):
        return np.float32 if self.config.dtype == "float32" else np.float64

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key in ("config", "_params"):
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def params(self) -> dict:
        return self._params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def gate_weight(self, V: Tensor, V_c: Tensor, index: int = 0) -> Tensor:
        """Scalar gate per example, shape ``(.., 1, 1)``, strictly inside (0, 1)."""
        if V.shape != V_c.shape:
            raise DimensionError(f"gate_weight: shapes {V.shape} and {V_c.shape} differ")
        if self.config.pin_gate is not None:
            shape = V.shape[:-2] + (1, 1)
            return nx.Tensor(np.full(shape, self.config.pin_gate, dtype=V.data.dtype))
        pv = nx.matmul(nx.mean_pool_rows(V), self.gate_w_v)
        pc = nx.matmul(nx.mean_pool_rows(V_c), self.gate_w_c)
        b = self.gate_b if self.gate_b.shape[0] == 1 else nx.index(self.gate_b, slice(index, index + 1))
        return nx.sigmoid(nx.add(nx.add(pv, pc), b))

    def encode_report(self, reports: np.ndarray, mask: np.ndarray) -> Tensor:
        """Encode ``(B, N_c)`` padded conditional reports to ``(B, N_c, D)``."""
        reports = np.asarray(reports, dtype=np.int64)
        lengths = np.asarray(mask).sum(axis=-1)
        return self.report_encoder(self.embed(reports), lengths)

    def encode(self, images, cond_images=None, cond_reports=None, cond_mask=None) -> Context:
        cfg = self.config
        images = np.asarray(images, dtype=self.dtype)
        B = images.shape[0]
        L = cfg.n_conditions
        if not cfg.conditional:
            V = self.visual_encoder(images)
            return Context(V=V, visual=self.attn_visual.prepare(V, V))
        if cond_images is None or cond_reports is None:
            raise UsageError(f"mode {cfg.mode} needs conditional images and reports")
        cond_images = np.asarray(cond_images, dtype=self.dtype)
        cond_reports = np.asarray(cond_reports, dtype=np.int64)
        if cond_images.shape[:2] != (B, L) or cond_reports.shape[:2] != (B, L):
            raise DimensionError(
                f"expected {L} conditions per example, got images {cond_images.shape[:2]} "
                f"and reports {cond_reports.shape[:2]}")
        n_c = cond_reports.shape[2]
        if n_c > cfg.cond_len:
            raise DimensionError(f"conditional reports have {n_c} positions, limit is {cfg.cond_len}")
        if cond_mask is None:
            cond_mask = cond_reports != PAD
        cond_mask = np.asarray(cond_mask, dtype=bool)
        # a condition slot whose report mask is empty is absent: none of its rows are attended
        present = cond_mask.any(axis=-1)
        if not present.any(axis=1).all():
            raise UsageError("every example needs at least one conditional exam")

        stacked = np.concatenate([images[:, None], cond_images], axis=1)
        feats = self.visual_encoder(stacked.reshape((B * (1 + L),) + images.shape[1:]))
        K, D = feats.shape[-2:]
        feats = nx.reshape(feats, (B, 1 + L, K, D))
        V = nx.index(feats, (slice(None), 0))
        V_cs = [nx.index(feats, (slice(None), 1 + i)) for i in range(L)]

        use_image = cfg.variant in ("full", "image", "image_report")
        use_text = cfg.variant in ("full", "report", "image_report")
        if cfg.variant == "full":
            visual_parts = [delta_features(V, vc) for vc in V_cs]
        elif use_image:
            visual_parts = list(V_cs)
        else:
            visual_parts = []

        text_parts, masks, gates = [], [], []
        if use_text:
            # absent slots are encoded as a lone PAD token; their rows stay masked below
            enc_mask = cond_mask.copy()
            enc_mask[~present, 0] = True
            T = self.encode_report(cond_reports.reshape(B * L, n_c), enc_mask.reshape(B * L, n_c))
            T = nx.reshape(T, (B, L, n_c, D))
            for i in range(L):
                t_i = nx.index(T, (slice(None), i))
                if cfg.mode == "deltaL":
                    g = self.gate_weight(V, V_cs[i], i)
                    gates.append(g)
                    t_i = nx.mul(g, t_i)
                text_parts.append(t_i)
                masks.append(cond_mask[:, i])
        delta_rows, text_rows, text_mask = assemble_banks(visual_parts, text_parts, masks)
        delta_mask = None if present.all() else np.repeat(present, K, axis=1)
        ctx = Context(V=V, visual=self.attn_visual.prepare(V, V), gates=gates, n_conditions=L,
                      delta_rows=delta_rows, text_rows=text_rows, text_mask=text_mask,
                      delta_mask=delta_mask)
        if delta_rows is not None:
            ctx.delta = self.attn_delta.prepare(delta_rows, delta_rows, delta_mask)
        if text_rows is not None:
            ctx.text = self.attn_text.prepare(text_rows, text_rows, text_mask)
        return ctx

    # ------------------------------------------------------------------
    # decoding
    # ------------------------------------------------------------------

    def _zeros_state(self, B: int) -> Tensor:
        return nx.Tensor(np.zeros((B, 1, self.config.dim), dtype=self.dtype))

    def _features(self, ctx: Context, x_proj: Tensor, h: Tensor, c: Tensor):
        """One decoder step from the projected previous word; returns ``(h, c, feats, weights)``."""
        h, c = self.decoder.recur(x_proj, h, c)
        a, w_a = self.attn_visual.attend(h, ctx.visual)
        parts = [h, a]
        weights = {"visual": w_a}
        if self.config.conditional:
            if ctx.delta is None and ctx.text is None:
                raise UsageError("conditional decoding needs at least one conditional bank")
            if ctx.delta is not None:
                s, weights["delta"] = self.attn_delta.attend(h, ctx.delta)
            else:
                s = self._zeros_state(h.shape[0])
            if ctx.text is not None:
                ct, weights["text"] = self.attn_text.attend(h, ctx.text)
            else:
                ct = self._zeros_state(h.shape[0])
            parts += [s, ct]
        return h, c, nx.concat(parts, axis=-1), weights

    def forward_loss(self, batch: Batch) -> Tensor:
        """Teacher-forced masked cross-entropy, averaged over real target tokens."""
        ctx = self.encode(batch.images, batch.cond_images, batch.cond_reports, batch.cond_mask)
        targets = np.asarray(batch.targets, dtype=np.int64)
        mask = np.asarray(batch.target_mask)
        T = int(mask.sum(axis=1).max())
        inputs, outputs, out_mask = targets[:, :T - 1], targets[:, 1:T], mask[:, 1:T]
        B, steps = inputs.shape
        x_proj = self.decoder.project_inputs(self.embed(inputs))
        h = c = self._zeros_state(B)
        feats = []
        for t in range(steps):
            h, c, f, _ = self._features(ctx, nx.index(x_proj, (slice(None), slice(t, t + 1))), h, c)
            feats.append(f)
        F = nx.concat(feats, axis=1)
        probs = nx.softmax_rows(nx.matmul(F, self.w_p))
        return nx.cross_entropy(probs, outputs, out_mask)

    def decode_step(self, ctx: Context, prev_tokens, h: Tensor, c: Tensor):
        """Next-word distribution ``(B, E)`` given the previous tokens and state."""
        prev = np.asarray(prev_tokens, dtype=np.int64).reshape(-1, 1)
        x_proj = self.decoder.project_inputs(self.embed(prev))
        h, c, f, weights = self._features(ctx, x_proj, h, c)
        probs = nx.softmax_rows(nx.matmul(f, self.w_p))
        B = prev.shape[0]
        return nx.reshape(probs, (B, self.config.vocab_size)), h, c, weights

    def _trace_entry(self, weights: dict, row: int) -> dict:
        return {k: w.data[row, :, 0, :].copy() for k, w in weights.items()}

    def generate(self, image, cond_images=None, cond_reports=None, cond_mask=None,
                 strategy: str = "greedy", beam_width: int = 3):
        """Decode one report; returns ``(tokens, DecodeTrace)``.

        ``tokens`` excludes BOS and ends with EOS unless the length cap was hit.
        Beam search ranks by total log-probability and breaks ties towards the
        lower token id.
        """
        cfg = self.config
        img = np.asarray(image)[None]
        ci = None if cond_images is None else np.asarray(cond_images)[None]
        cr = None if cond_reports is None else np.asarray(cond_reports)[None]
        cm = None if cond_mask is None else np.asarray(cond_mask)[None]
        with nx.no_grad():
            ctx = self.encode(img, ci, cr, cm)
            if strategy == "greedy":
                return self._greedy(ctx)
            if strategy == "beam":
                return self._beam(ctx, beam_width)
        raise ValueError(f"unknown decoding strategy {strategy!r}")

    def _new_trace(self, ctx: Context) -> DecodeTrace:
        return DecodeTrace(positions=self.config.positions,
                           cond_len=ctx.text_mask.shape[-1] // ctx.n_conditions
                           if ctx.text_mask is not None else self.config.cond_len,
                           n_conditions=ctx.n_conditions)

    def _greedy(self, ctx: Context):
        trace = self._new_trace(ctx)
        h = c = self._zeros_state(1)
        prev = BOS
        for _ in range(self.config.max_decode_len):
            probs, h, c, weights = self.decode_step(ctx, [prev], h, c)
            p = probs.data[0]
            tok = int(np.argmax(p))
            trace.tokens.append(tok)
            trace.logprobs.append(float(np.log(p[tok])))
            trace.weights.append(self._trace_entry(weights, 0))
            prev = tok
            if tok == EOS:
                break
        return list(trace.tokens), trace

    def _beam(self, ctx: Context, width: int):
        if width < 1:
            raise ValueError("beam width must be at least 1")
        E = self.config.vocab_size
        h = c = self._zeros_state(1)
        beams = [(0.0, [], [], [])]  # (score, tokens, logprobs, weights)
        finished = []
        prev = np.array([BOS])
        for _ in range(self.config.max_decode_len):
            probs, h, c, weights = self.decode_step(ctx, prev, h, c)
            logp = np.log(probs.data)
            scores = np.array([b[0] for b in beams])[:, None] + logp
            flat = scores.reshape(-1)
            beam_idx = np.repeat(np.arange(len(beams)), E)
            tok_idx = np.tile(np.arange(E), len(beams))
            order = np.lexsort((beam_idx, tok_idx, -flat))[:width]
            new_beams, keep_rows = [], []
            for o in order:
                b, tok = int(beam_idx[o]), int(tok_idx[o])
                score, toks, lps, ws = beams[b]
                entry = (float(flat[o]), toks + [tok], lps + [float(logp[b, tok])],
                         ws + [self._trace_entry(weights, b)])
                if tok == EOS:
                    finished.append(entry)
                else:
                    new_beams.append(entry)
                    keep_rows.append(b)
            if not new_beams or (finished and len(finished) >= width):
                break
            beams = new_beams
            rows = np.array(keep_rows)
            h = nx.Tensor(h.data[rows])
            c = nx.Tensor(c.data[rows])
            prev = np.array([b[1][-1] for b in beams])
        pool = finished if finished else beams
        best = min(pool, key=lambda e: (-e[0], e[1]))
        trace = self._new_trace(ctx)
        trace.tokens, trace.logprobs, trace.weights = list(best[1]), best[2], best[3]
        return list(best[1]), trace

    def greedy_batch(self, batch: Batch) -> list:
        """Greedy decoding for a whole batch; returns token lists without BOS."""
        with nx.no_grad():
            ctx = self.encode(batch.images, batch.cond_images, batch.cond_reports, batch.cond_mask)
            B = len(batch)
            h = c = self._zeros_state(B)
            prev = np.full(B, BOS)
            done = np.zeros(B, dtype=bool)
            out = [[] for _ in range(B)]
            for _ in range(self.config.max_decode_len):
                probs, h, c, _ = self.decode_step(ctx, prev, h, c)
                prev = np.argmax(probs.data, axis=1)
                for b in np.flatnonzero(~done):
                    out[b].append(int(prev[b]))
                done |= prev == EOS
                if done.all():
                    break
        return out

    # ------------------------------------------------------------------
    # state
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict:
        return {k: p.data for k, p in self._params.items()}

    def load_state(self, arrays: dict, strict: bool = True):
        for k, p in self._params.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {k}")
                continue
            src = np.asarray(arrays[k])
            if src.shape != p.shape:
                raise DimensionError(f"parameter {k}: stored shape {src.shape} != {p.shape}")
            p.data[...] = src

    def copy_from(self, other: "DeltaNetModel"):
        """Load every same-named parameter from ``other``."""
        self.load_state(other.state_arrays(), strict=False)


def train_step(model: DeltaNetModel, optimizer: Adam, batch: Batch) -> float:
    optimizer.zero_grad()
    loss = model.forward_loss(batch)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("cross_entropy")
    nx.backward(loss)
    optimizer.step()
    return value


def export_trace(trace: DecodeTrace, span=None) -> list:
    """Head-averaged attention per bank for the decode steps in ``span``.

    Rows are mapped back to their source: visual rows to spatial positions,
    delta rows ``i*K + k`` to (condition ``i``, position ``k``), text rows
    ``i*N_c + j`` to (condition ``i``, token ``j``).
    """
    n = len(trace.tokens)
    start, end = (0, n) if span is None else span
    if not (0 <= start < end <= n):
        raise IndexError(f"span {span} outside the generated sequence of length {n}")
    K, Nc = trace.positions, trace.cond_len
    out = []
    for t in range(start, end):
        banks = {}
        for bank, w in trace.weights[t].items():
            avg = w.mean(axis=0)
            rows = []
            for r, val in enumerate(avg):
                if bank == "visual":
                    rows.append({"row": r, "position": r, "weight": float(val)})
                elif bank == "delta":
                    rows.append({"row": r, "condition": r // K, "position": r % K, "weight": float(val)})
                else:
                    rows.append({"row": r, "condition": r // Nc, "token": r % Nc, "weight": float(val)})
            banks[bank] = rows
        out.append({"step": t, "token": trace.tokens[t], "logprob": trace.logprobs[t], "banks": banks})
    return out


def save_checkpoint(path, model: DeltaNetModel, optimizer: Adam | None = None, epoch: int = 0,
                    vocab: Sequence[str] | None = None, extra: dict | None = None) -> Path:
    import hashlib

    header = {"format": "deltanet-checkpoint", "version": CHECKPOINT_VERSION,
              "config": model.config.to_dict(), "epoch": int(epoch),
              "vocab": list(vocab) if vocab is not None else None,
              "vocab_hash": hashlib.sha256("\n".join(vocab).encode()).hexdigest()[:16]
              if vocab is not None else None,
              "extra": extra or {}}
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    if optimizer is not None:
        header["optimizer"] = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                               "beta2": optimizer.beta2, "eps": optimizer.eps}
        arrays.update(optimizer.state_arrays())
    return _io.write_container(path, b"DNCK", header, arrays)


def load_checkpoint(path):
    """Returns ``(model, optimizer_or_None, header)``."""
    header, arrays = _io.read_container(path, b"DNCK")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    model = DeltaNetModel(ModelConfig.from_dict(header["config"]))
    model.load_state({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        opt = Adam(model.params(), lr=o["lr"], betas=(o["beta1"], o["beta2"]), eps=o["eps"])
        opt.load_state(o["t"], arrays)
    return model, opt, header
