"""Speech and text Transformers, parameter transfer and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Domain

SPEECH, TEXT = "speech", "text"
TAG_NONE, TAG_ENCODER, TAG_DECODER = "none", "encoder", "decoder"
N_TAGS = 3
MIN_FRAMES = 4

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kind: str = SPEECH
    vocab_size: int = 8008
    n_enc_layers: int = 11
    n_dec_layers: int = 4
    d_model: int = 512
    n_heads: int = 8
    d_ffn: int = 2048
    dropout: float = 0.1
    conv_channels: int = 64
    n_features: int = 40
    ctc_layer: int | None = 8
    tag_mode: str = TAG_NONE
    distance_penalty_scale: float = 1.0
    # add the encoder-side tag before (True) or after the positional encoding
    tag_before_positions: bool = True

    def __post_init__(self):
        if self.kind not in (SPEECH, TEXT):
            raise ModelError(f"kind must be {SPEECH!r} or {TEXT!r}")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.ctc_layer is not None and not 1 <= self.ctc_layer <= self.n_enc_layers:
            raise ModelError("ctc_layer must be in [1, n_enc_layers]")
        if self.tag_mode not in (TAG_NONE, TAG_ENCODER, TAG_DECODER):
            raise ModelError(f"unknown tag_mode {self.tag_mode!r}")
        if min(self.n_enc_layers, self.n_dec_layers, self.vocab_size) < 1:
            raise ModelError("layer counts and vocab_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def conv_out_len(t: int) -> int:
    return math.ceil(math.ceil(t / 2) / 2)


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def log_distance_bias(n: int, scale: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    """Additive attention-logit bias -scale * ln(1 + |i - j|)."""
    idx = torch.arange(n, dtype=torch.float64)
    return (-scale * torch.log1p((idx[:, None] - idx[None, :]).abs())).to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key_value, key_padding_mask=None, bias=None, causal=False, return_weights=False):
        b, tq, d = query.shape
        tk = key_value.shape[1]
        h, dh = self.n_heads, self.d_head
        q = self.q_proj(query).view(b, tq, h, dh).transpose(1, 2)
        k = self.k_proj(key_value).view(b, tk, h, dh).transpose(1, 2)
        v = self.v_proj(key_value).view(b, tk, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if bias is not None:
            logits = logits + bias
        if causal:
            future = torch.ones(tq, tk, dtype=torch.bool, device=query.device).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, tq, d)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ffn: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + FFN block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, padding_mask, bias=None):
        h = self.attn_norm(x)
        x = x + self.dropout(self.self_attn(h, h, padding_mask, bias))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.self_attn_norm = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, cfg.dropout)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, self_padding_mask, memory, memory_padding_mask):
        h = self.self_attn_norm(x)
        x = x + self.dropout(self.self_attn(h, h, self_padding_mask, causal=True))
        h = self.cross_attn_norm(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory_padding_mask))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class EncoderOut(NamedTuple):
    memory: torch.Tensor  # B x T' x d
    padding_mask: torch.Tensor  # B x T', True at padding
    ctc_states: torch.Tensor | None  # B x T' x d
    lengths: torch.Tensor  # B


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.output_proj = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, prev_tokens, enc: EncoderOut, tag_vectors=None, pad_id: int = 0):
        if prev_tokens.numel() and int(prev_tokens.max()) >= self.cfg.vocab_size:
            raise ModelError(f"token id {int(prev_tokens.max())} >= vocab_size {self.cfg.vocab_size}")
        x = self.embed_tokens(prev_tokens) * math.sqrt(self.cfg.d_model)
        if tag_vectors is not None:
            x = x + tag_vectors[:, None, :]
        x = x + sinusoidal_positions(x.shape[1], self.cfg.d_model, x.dtype)
        x = self.dropout(x)
        pad = prev_tokens == pad_id
        for layer in self.layers:
            x = layer(x, pad, enc.memory, enc.padding_mask)
        return self.output_proj(self.final_norm(x))


class _Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tag_embed = nn.Embedding(N_TAGS, cfg.d_model)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.decoder = Decoder(cfg)
        if cfg.ctc_layer is not None:
            self.ctc_norm = nn.LayerNorm(cfg.d_model)
            self.ctc_proj = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.dropout = nn.Dropout(cfg.dropout)

    def _tags(self, tags, mode):
        if tags is None or self.cfg.tag_mode != mode:
            return None
        return self.tag_embed(tags)

    def _run_encoder(self, x, padding_mask, lengths, tags, bias=None) -> EncoderOut:
        tag_vec = self._tags(tags, TAG_ENCODER)
        if tag_vec is not None and self.cfg.tag_before_positions:
            x = x + tag_vec[:, None, :]
        x = x + sinusoidal_positions(x.shape[1], self.cfg.d_model, x.dtype)
        if tag_vec is not None and not self.cfg.tag_before_positions:
            x = x + tag_vec[:, None, :]
        x = self.dropout(x)
        ctc_states = None
        for i, layer in enumerate(self.encoder_layers, start=1):
            x = layer(x, padding_mask, bias)
            if i == self.cfg.ctc_layer:
                ctc_states = x
        return EncoderOut(self.encoder_norm(x), padding_mask, ctc_states, lengths)

    def decode(self, prev_tokens, enc: EncoderOut, tags=None):
        return self.decoder(prev_tokens, enc, self._tags(tags, TAG_DECODER))

    def ctc_log_probs(self, enc: EncoderOut) -> torch.Tensor:
        if enc.ctc_states is None:
            raise ModelError("model has no CTC head")
        return torch.log_softmax(self.ctc_proj(self.ctc_norm(enc.ctc_states)), dim=-1)

    def forward(self, inputs, input_lengths, prev_tokens, tags=None):
        enc = self.encode(inputs, input_lengths, tags)
        return self.decode(prev_tokens, enc, tags), enc


class SpeechTransformer(_Seq2Seq):
    """Two stride-2 3x3 convolutions, linear projection, then an encoder with a
    logarithmic distance penalty on self-attention, and a standard decoder."""

    def __init__(self, cfg: ModelConfig):
        if cfg.kind != SPEECH:
            raise ModelError("SpeechTransformer needs kind='speech'")
        super().__init__(cfg)
        c = cfg.conv_channels
        self.conv1 = nn.Conv2d(1, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.input_proj = nn.Linear(c * conv_out_len(cfg.n_features), cfg.d_model)

    def encode(self, feats, lengths, tags=None) -> EncoderOut:
        """``feats``: B x T x F zero-padded; ``lengths``: B frame counts."""
        lengths = torch.as_tensor(lengths)
        if int(lengths.min()) < MIN_FRAMES:
            raise ModelError(f"input too short: need at least {MIN_FRAMES} frames")
        if feats.shape[-1] != self.cfg.n_features:
            raise ModelError(f"expected {self.cfg.n_features} features, got {feats.shape[-1]}")
        x = F.relu(self.conv1(feats[:, None]))
        x = F.relu(self.conv2(x))
        b, c, t, f = x.shape
        x = self.input_proj(x.permute(0, 2, 1, 3).reshape(b, t, c * f))
        out_lens = torch.tensor([conv_out_len(int(n)) for n in lengths])
        padding_mask = torch.arange(t)[None, :] >= out_lens[:, None]
        bias = log_distance_bias(t, self.cfg.distance_penalty_scale, x.dtype)
        return self._run_encoder(x, padding_mask, out_lens, tags, bias)


class TextTransformer(_Seq2Seq):
    """Plain Transformer over source tokens (no distance penalty)."""

    def __init__(self, cfg: ModelConfig):
        if cfg.kind != TEXT:
            raise ModelError("TextTransformer needs kind='text'")
        super().__init__(cfg)
        self.embed_source = nn.Embedding(cfg.vocab_size, cfg.d_model)

    def encode(self, src_tokens, lengths=None, tags=None, pad_id: int = 0) -> EncoderOut:
        if src_tokens.shape[1] == 0:
            raise ModelError("empty source")
        if int(src_tokens.max()) >= self.cfg.vocab_size:
            raise ModelError(f"token id {int(src_tokens.max())} >= vocab_size {self.cfg.vocab_size}")
        padding_mask = src_tokens == pad_id
        if lengths is None:
            lengths = (~padding_mask).sum(dim=1)
        x = self.embed_source(src_tokens) * math.sqrt(self.cfg.d_model)
        return self._run_encoder(x, padding_mask, torch.as_tensor(lengths), tags)


def build_model(cfg: ModelConfig, seed: int | None = 0) -> _Seq2Seq:
    model = SpeechTransformer(cfg) if cfg.kind == SPEECH else TextTransformer(cfg)
    if seed is not None:
        init_parameters(model, torch.Generator().manual_seed(seed))
    return model


@torch.no_grad()
def init_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Fan-in scaled uniform for linear/conv weights, N(0, d^-1/2) for embeddings."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
            m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * m.weight.shape[1] ** -0.5)
        elif isinstance(m, nn.LayerNorm):
            m.weight.fill_(1.0)
            m.bias.zero_()


def count_parameters(cfg: ModelConfig) -> int:
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    attn = 4 * (d * d + d)
    ffn = 2 * d * f + f + d
    ln = 2 * d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    total = N_TAGS * d + cfg.n_enc_layers * enc_layer + ln
    total += v * d + cfg.n_dec_layers * dec_layer + ln + d * v + v
    if cfg.ctc_layer is not None:
        total += ln + d * v + v
    if cfg.kind == SPEECH:
        c = cfg.conv_channels
        total += (9 * c + c) + (9 * c * c + c) + c * conv_out_len(cfg.n_features) * d + d
    else:
        total += v * d
    return total


# ---------------------------------------------------------------------------
# Single-input operations
# ---------------------------------------------------------------------------


def _tag_tensor(tag: Domain | None):
    return None if tag is None else torch.tensor([tag.index])


def encode_speech(x: np.ndarray | torch.Tensor, tag: Domain | None, model: SpeechTransformer, train_mode: bool = False):
    """Encode one T x F matrix; returns ``(memory, ctc_states)`` as T' x d tensors."""
    model.train(train_mode)
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(x), dtype=dtype)[None]
    enc = model.encode(feats, [feats.shape[1]], _tag_tensor(tag))
    ctc = None if enc.ctc_states is None else enc.ctc_states[0]
    return enc.memory[0], ctc


def encode_text(tokens, model: TextTransformer, train_mode: bool = False) -> torch.Tensor:
    model.train(train_mode)
    src = torch.as_tensor(list(tokens), dtype=torch.long)[None]
    if src.shape[1] == 0:
        raise ModelError("empty source")
    return model.encode(src).memory[0]


def decode_step(prev_tokens, memory: torch.Tensor, tag: Domain | None, model: _Seq2Seq, train_mode: bool = False):
    """Logits (N x V) for every position of ``prev_tokens`` given one memory (T' x d)."""
    model.train(train_mode)
    prev = torch.as_tensor(list(prev_tokens), dtype=torch.long)[None]
    mem = memory[None]
    enc = EncoderOut(mem, torch.zeros(1, mem.shape[1], dtype=torch.bool), None, torch.tensor([mem.shape[1]]))
    return model.decode(prev, enc, _tag_tensor(tag))[0]


# ---------------------------------------------------------------------------
# Parameter transfer
# ---------------------------------------------------------------------------

_FRONT_END = ("conv1.", "conv2.", "input_proj.", "ctc_norm.", "ctc_proj.")


def init_from_asr(
    st_model: SpeechTransformer, asr_model: SpeechTransformer, seed: int = 0
) -> SpeechTransformer:
    """Re-initialise ``st_model`` and copy the ASR front end and lower encoder layers.

    Convolutions, input projection, CTC head (when both have one) and encoder
    layers ``1..asr.n_enc_layers`` are copied; upper encoder layers, tag
    embeddings, final encoder norm and the decoder keep a fresh init.
    """
    st_cfg, asr_cfg = st_model.cfg, asr_model.cfg
    if st_cfg.n_enc_layers < asr_cfg.n_enc_layers:
        raise ModelError("ST encoder must have at least as many layers as the ASR encoder")
    init_parameters(st_model, torch.Generator().manual_seed(seed))
    src = asr_model.state_dict()
    dst = st_model.state_dict()
    prefixes = _FRONT_END + tuple(f"encoder_layers.{i}." for i in range(asr_cfg.n_enc_layers))
    copied = {}
    for name, tensor in src.items():
        if not name.startswith(prefixes) or name not in dst:
            continue
        if dst[name].shape != tensor.shape:
            raise ModelError(f"shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(dst[name].shape)}")
        copied[name] = tensor.clone()
    st_model.load_state_dict(copied, strict=False)
    return st_model


def init_decoder_from(st_model: _Seq2Seq, mt_model: _Seq2Seq) -> _Seq2Seq:
    """Copy every decoder tensor from a text model into ``st_model``."""
    dst = st_model.state_dict()
    copied = {}
    for name, tensor in mt_model.state_dict().items():
        if name.startswith("decoder."):
            if dst[name].shape != tensor.shape:
                raise ModelError(f"shape mismatch for {name}")
            copied[name] = tensor.clone()
    st_model.load_state_dict(copied, strict=False)
    return st_model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    step: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: _Seq2Seq, step: int = 0, **metadata) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, params, step, metadata)

    def build(self, dtype=torch.float32) -> _Seq2Seq:
        model = build_model(self.config, seed=None)
        model.load_state_dict(self.params)
        return model.to(dtype).eval()

    def with_params(self, params: dict[str, torch.Tensor], **metadata) -> "Checkpoint":
        return replace(self, params=params, metadata={**self.metadata, **metadata})


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """``STCK``, u32 version, u32 header length, JSON header, then per tensor:
    u32 name length, name, u32 ndim, u32 dims, little-endian f32 data."""
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "step": ckpt.step, "metadata": ckpt.metadata}, sort_keys=True
    ).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header, struct.pack("<I", len(ckpt.params))]
    for name, t in ckpt.params.items():
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
        off += 4 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = torch.from_numpy(arr.astype(np.float32))
    cfg = ModelConfig.from_dict(header["config"])
    return Checkpoint(cfg, params, header["step"], header["metadata"])
