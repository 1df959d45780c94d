"""The multimodal QA network: per-stream encoders, modality fusion, context-query alignment, scoring.

Every answer candidate is scored by its own pass through the network; passes are
batched, with the candidate-independent streams (text, audio, video, question)
encoded once per sample and shared by that sample's candidates.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tc
from .coattention import CoAttentionParams, bind_coattention, coattend, init_coattention
from .data import Batch, Sample, collate
from .recurrent import BiLstmParams, bind_bilstm, encode_masked, init_bilstm, valid_mask
from .tensor import ParameterStore, Tape, Tensor

FUSION_SITES = ("ta", "av", "vt")
QUERY_SITES = ("uq", "uc")
STREAMS = ("text", "audio", "video", "question", "answer")


@dataclass(frozen=True)
class ModelConfig:
    d_text: int = 768
    d_audio: int = 74
    d_video: int = 2208
    h_text: int = 200
    h_audio: int = 100
    h_video: int = 250
    h_query: int = 100
    h_fusion: int = 100
    h_final: int = 100
    d_att: int = 100
    d_ffn: int = 64
    L: int = 25
    ablate_fusion_coattention: bool = False
    ablate_context_query_coattention: bool = False
    mask_padding: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 1:
                raise ValueError(f"ModelConfig.{f.name} must be positive, got {v}")

    @property
    def d_query(self) -> int:
        # questions and answers use the text feature extractor
        return self.d_text

    def widths(self) -> dict[str, int]:
        """Feature widths of every intermediate sequence."""
        w = {
            "text": 2 * self.h_text, "audio": 2 * self.h_audio, "video": 2 * self.h_video,
            "question": 2 * self.h_query, "answer": 2 * self.h_query,
        }
        w["ta"] = w["audio"] + w["text"]
        w["av"] = w["video"] + w["audio"]
        w["vt"] = w["text"] + w["video"]
        enc = w["text"] + w["audio"] + w["video"]
        w["fusion_in"] = enc if self.ablate_fusion_coattention else w["ta"] + w["av"] + w["vt"] + enc
        w["context"] = 2 * self.h_fusion
        w["uq"] = w["question"] + w["context"]
        w["uc"] = w["answer"] + w["context"]
        base = w["question"] + w["answer"] + w["context"]
        w["final_in"] = base if self.ablate_context_query_coattention else w["uq"] + w["uc"] + base
        w["final"] = 2 * self.h_final
        return w

    def with_ablation(self, which: str) -> "ModelConfig":
        if which == "none":
            flags = (False, False)
        elif which == "fusion":
            flags = (True, False)
        elif which == "context-query":
            flags = (False, True)
        else:
            raise ValueError(f"unknown ablation {which!r}")
        d = asdict(self)
        d["ablate_fusion_coattention"], d["ablate_context_query_coattention"] = flags
        return ModelConfig(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used for gradient checks."""
    base = dict(d_text=6, d_audio=4, d_video=8, h_text=3, h_audio=2, h_video=4, h_query=2,
                h_fusion=3, h_final=3, d_att=3, d_ffn=4, L=3)
    base.update(overrides)
    return ModelConfig(**base)


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Seeded initialisation of every named parameter, in a fixed creation order."""
    rng = np.random.default_rng(seed)
    w = config.widths()
    store = ParameterStore()
    d_in = {"text": config.d_text, "audio": config.d_audio, "video": config.d_video,
            "question": config.d_query, "answer": config.d_query}
    hid = {"text": config.h_text, "audio": config.h_audio, "video": config.h_video,
           "question": config.h_query, "answer": config.h_query}
    for s in STREAMS:
        init_bilstm(store, f"enc.{s}", d_in[s], hid[s], rng)
    pairs = {"ta": ("text", "audio"), "av": ("audio", "video"), "vt": ("video", "text")}
    for site, (p, q) in pairs.items():
        init_coattention(store, f"coatt.{site}", w[p], w[q], config.d_att, rng)
    init_bilstm(store, "fusion", w["fusion_in"], config.h_fusion, rng)
    init_coattention(store, "coatt.uq", w["context"], w["question"], config.d_att, rng)
    init_coattention(store, "coatt.uc", w["context"], w["answer"], config.d_att, rng)
    init_bilstm(store, "final", w["final_in"], config.h_final, rng)
    fan = w["final"]
    store.add("w_r", rng.uniform(-1, 1, size=fan) / np.sqrt(fan))
    store.add("ffn.W1", rng.uniform(-1, 1, size=(config.d_ffn, fan)) / np.sqrt(fan))
    store.add("ffn.b1", np.zeros(config.d_ffn))
    store.add("ffn.W2", rng.uniform(-1, 1, size=(1, config.d_ffn)) / np.sqrt(config.d_ffn))
    store.add("ffn.b2", np.zeros(1))
    return store


def zero_params(config: ModelConfig) -> ParameterStore:
    store = init_params(config, 0)
    for n in store.names():
        store.set_value(n, np.zeros_like(store.value(n)))
    return store


@dataclass
class ModelParams:
    encoders: dict[str, BiLstmParams]
    fusion_coatt: dict[str, CoAttentionParams]
    fusion: BiLstmParams
    query_coatt: dict[str, CoAttentionParams]
    final: BiLstmParams
    w_r: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def bind(cls, store: ParameterStore, tape: Tape | None = None) -> "ModelParams":
        """View the store's arrays as tensors: leaves on ``tape``, or constants without one."""
        get = (lambda n: tape.watch(store, n)) if tape is not None else (lambda n: Tensor(store.value(n)))
        return cls(
            encoders={s: bind_bilstm(store, f"enc.{s}", tape) for s in STREAMS},
            fusion_coatt={s: bind_coattention(store, f"coatt.{s}", tape) for s in FUSION_SITES},
            fusion=bind_bilstm(store, "fusion", tape),
            query_coatt={s: bind_coattention(store, f"coatt.{s}", tape) for s in QUERY_SITES},
            final=bind_bilstm(store, "final", tape),
            w_r=get("w_r"), W1=get("ffn.W1"), b1=get("ffn.b1"), W2=get("ffn.W2"), b2=get("ffn.b2"),
        )


@dataclass
class ForwardTrace:
    """Intermediate values of one batched forward pass, captured on request."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def put(self, name: str, t: Tensor, mask: np.ndarray | None = None):
        self.values[name] = t.data
        if mask is not None:
            self.masks[name] = mask


@dataclass
class Encoded:
    """A sequence with its validity mask."""

    seq: Tensor
    mask: np.ndarray


def _attention_mask(config: ModelConfig, mask: np.ndarray) -> np.ndarray:
    return mask if config.mask_padding else np.ones_like(mask)


def _union(*masks: np.ndarray) -> np.ndarray:
    out = masks[0].copy()
    for m in masks[1:]:
        out |= m
    return out


def encode_inputs(batch: Batch, params: ModelParams, config: ModelConfig) -> dict[str, Encoded]:
    """Mask-aware BiLSTM encodings of all five streams (answers: one row per candidate)."""
    out = {}
    sources = {"text": batch.text, "audio": batch.audio, "video": batch.video,
               "question": batch.question, "answer": batch.answers}
    for s in STREAMS:
        lens = batch.lengths["answers" if s == "answer" else s]
        if np.any(lens < 1):
            bad = batch.ids[int(np.argmin(lens)) // (batch.n_candidates if s == "answer" else 1)]
            raise ValueError(f"sample {bad}: {s} stream has no valid timesteps")
        mask = valid_mask(lens, config.L)
        out[s] = Encoded(encode_masked(Tensor(sources[s]), mask, params.encoders[s]), mask)
    return out


def _coattend(a: Encoded, b: Encoded, p: CoAttentionParams, config: ModelConfig) -> Encoded:
    seq, mask = coattend(a.seq, b.seq, p, _attention_mask(config, a.mask), _attention_mask(config, b.mask))
    return Encoded(seq, a.mask & b.mask)


def _concat(parts: list[Encoded]) -> Encoded:
    return Encoded(tc.concat_features([p.seq for p in parts]), _union(*[p.mask for p in parts]))


def fuse_modalities(x_t: Encoded, x_a: Encoded, x_v: Encoded, params: ModelParams, config: ModelConfig,
                    trace: ForwardTrace | None = None) -> Encoded:
    """Multimodal context: fusion BiLSTM over [u_ta, u_av, u_vt, x_t, x_a, x_v]."""
    if not (x_t.seq.shape[-2] == x_a.seq.shape[-2] == x_v.seq.shape[-2]):
        raise tc.ShapeError("fuse_modalities: modality sequence lengths differ")
    parts = [x_t, x_a, x_v]
    if not config.ablate_fusion_coattention:
        pairs = {"ta": (x_t, x_a), "av": (x_a, x_v), "vt": (x_v, x_t)}
        attended = []
        for site, (p, q) in pairs.items():
            u = _coattend(p, q, params.fusion_coatt[site], config)
            if trace is not None:
                trace.put(f"u_{site}", u.seq, u.mask)
            attended.append(u)
        parts = attended + parts
    fused_in = _concat(parts)
    return Encoded(encode_masked(fused_in.seq, fused_in.mask, params.fusion), fused_in.mask)


def align_context_query(u: Encoded, q: Encoded, c: Encoded, params: ModelParams, config: ModelConfig,
                        trace: ForwardTrace | None = None) -> Encoded:
    """h = BiLSTM([v_uq, v_uc, q, c, u]) with v_uq, v_uc the context-query co-attentions."""
    if not (u.seq.shape[-2] == q.seq.shape[-2] == c.seq.shape[-2]):
        raise tc.ShapeError("align_context_query: sequence lengths differ")
    parts = [q, c, u]
    if not config.ablate_context_query_coattention:
        v_uq = _coattend(u, q, params.query_coatt["uq"], config)
        v_uc = _coattend(u, c, params.query_coatt["uc"], config)
        if trace is not None:
            trace.put("v_uq", v_uq.seq, v_uq.mask)
            trace.put("v_uc", v_uc.seq, v_uc.mask)
        parts = [v_uq, v_uc] + parts
    joined = _concat(parts)
    return Encoded(encode_masked(joined.seq, joined.mask, params.final), joined.mask)


def self_align(h: Tensor, w_r: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Collapse the rows of ``h`` to one vector with weights softmax(h . w_r) over valid rows.

    Returns ``(h_hat, beta)``.
    """
    if mask is not None and not np.all(np.asarray(mask).any(axis=-1)):
        raise ValueError("self_align: no valid positions")
    scores = tc.matmul(h, w_r)
    beta = tc.softmax_axis(scores, "rows", mask)
    return tc.weighted_sum(beta, h), beta


def score_head(h_hat: Tensor, params: ModelParams) -> Tensor:
    hidden = tc.relu(tc.add_bias(tc.matmul(h_hat, tc.transpose(params.W1)), params.b1))
    out = tc.add_bias(tc.matmul(hidden, tc.transpose(params.W2)), params.b2)
    return tc.reshape(out, out.shape[:-1])


def forward(batch: Batch, params: ModelParams, config: ModelConfig,
            trace: ForwardTrace | None = None) -> Tensor:
    """Logits for every candidate of every sample, shape (B*K,)."""
    enc = encode_inputs(batch, params, config)
    if trace is not None:
        for s, e in enc.items():
            trace.put(f"x_{s}", e.seq, e.mask)
    u = fuse_modalities(enc["text"], enc["audio"], enc["video"], params, config, trace)
    owner = batch.owner
    u_k = Encoded(tc.take_rows(u.seq, owner), u.mask[owner])
    q_k = Encoded(tc.take_rows(enc["question"].seq, owner), enc["question"].mask[owner])
    h = align_context_query(u_k, q_k, enc["answer"], params, config, trace)
    h_hat, beta = self_align(h.seq, params.w_r, _attention_mask(config, h.mask))
    logits = score_head(h_hat, params)
    if trace is not None:
        trace.put("u", u.seq, u.mask)
        trace.put("h", h.seq, h.mask)
        trace.put("beta", beta)
        trace.put("h_hat", h_hat)
        trace.put("score", logits)
    return logits


def batch_loss(batch: Batch, params: ModelParams, config: ModelConfig) -> Tensor:
    """Mean binary cross-entropy over all samples and candidates of the batch."""
    return tc.bce_with_logits(forward(batch, params, config), batch.labels)


def logits_for(batch: Batch, store: ParameterStore, config: ModelConfig) -> np.ndarray:
    """Constant-parameter forward pass; returns logits shaped (B, K)."""
    out = forward(batch, ModelParams.bind(store), config)
    return out.data.reshape(len(batch), batch.n_candidates)


def score_candidate(sample: Sample, index: int, store: ParameterStore, config: ModelConfig) -> float:
    if not 0 <= index < len(sample.candidates):
        raise IndexError(f"sample {sample.id}: no candidate {index}")
    return float(logits_for(collate([sample], config.L), store, config)[0, index])


def loss(sample: Sample, store: ParameterStore, config: ModelConfig, tape: Tape | None = None) -> Tensor:
    if not sample.labels:
        raise ValueError(f"sample {sample.id}: no labelled candidates")
    return batch_loss(collate([sample], config.L), ModelParams.bind(store, tape), config)


def choose(logits) -> int:
    """Argmax with ties going to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    return int(np.flatnonzero(logits == logits.max())[0])


def predict_a2(logits) -> int:
    if len(logits) != 2:
        raise ValueError(f"A2 needs 2 candidate logits, got {len(logits)}")
    return choose(logits)


def predict_a4(logits) -> int:
    if len(logits) != 4:
        raise ValueError(f"A4 needs 4 candidate logits, got {len(logits)}")
    return choose(logits)
