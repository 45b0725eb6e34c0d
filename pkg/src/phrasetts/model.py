"""Conditional encoder-decoder acoustic model (inference only).

Per phrase the decoder attends over a conditioned memory of width 896: the
512-d phoneme encoding at each step, followed by a 256-d context embedding
and a 128-d acoustic embedding duplicated along time.

* The context embedding encodes the previous and next phrases' encoder
  outputs with one shared reference encoder, concatenates the two 128-d
  codes and attends over a [10, 256] token table.
* The acoustic embedding encodes a reference mel-spectrogram with a second
  reference encoder (own parameters) and attends over a [10, 128] table.
* Decoding follows Tacotron 2: prenet, attention LSTM, location-sensitive
  attention, decoder LSTM, mel/stop projections and a residual postnet.
  Prenet dropout is off so decoding is deterministic.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .errors import FormatError, ShapeMismatch, UnknownPhonemeId
from .frontend import PhonemeSequence
from .nn import F32, GRUParams, LSTMParams
from .tensorio import N_MELS, read_tensors, write_tensors

ENCODER_DIM = 512
CONTEXT_DIM = 256
ACOUSTIC_DIM = 128
REF_EMBED_DIM = 128
CONDITION_DIM = ENCODER_DIM + CONTEXT_DIM + ACOUSTIC_DIM  # 896
REF_FILTERS = (32, 32, 64, 64, 128, 128)
N_TOKENS = 10
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_phonemes: int
    encoder_kernel: int = 5
    encoder_convs: int = 3
    ref_gru_dim: int = 128
    prenet_dim: int = 256
    attention_rnn_dim: int = 1024
    decoder_rnn_dim: int = 1024
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    postnet_channels: int = 512
    postnet_kernel: int = 5
    postnet_layers: int = 5

    @classmethod
    def small(cls, n_phonemes: int) -> "ModelConfig":
        """Reduced decoder widths for benchmarks and tests; embedding contract unchanged."""
        return cls(n_phonemes, prenet_dim=128, attention_rnn_dim=256, decoder_rnn_dim=256,
                   postnet_channels=256)

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]]) -> "ModelConfig":
        try:
            return cls(
                n_phonemes=shapes["embedding"][0],
                encoder_kernel=shapes["encoder.conv0.w"][2],
                encoder_convs=sum(1 for k in shapes if k.startswith("encoder.conv") and k.endswith(".w")),
                ref_gru_dim=shapes["context_ref.gru.w_hh"][0],
                prenet_dim=shapes["decoder.prenet.0.w"][1],
                attention_rnn_dim=shapes["decoder.attention_rnn.w_hh"][0],
                decoder_rnn_dim=shapes["decoder.decoder_rnn.w_hh"][0],
                attention_dim=shapes["decoder.attention.w_query"][1],
                location_filters=shapes["decoder.attention.location_conv"][0],
                location_kernel=shapes["decoder.attention.location_conv"][2],
                postnet_channels=shapes["decoder.postnet.0.w"][0],
                postnet_kernel=shapes["decoder.postnet.0.w"][2],
                postnet_layers=sum(1 for k in shapes if k.startswith("decoder.postnet.") and k.endswith(".w")),
            )
        except (KeyError, IndexError) as exc:
            raise FormatError(f"weight file lacks tensor needed to infer the config: {exc}") from None


def _ceil_halvings(n: int, times: int) -> int:
    for _ in range(times):
        n = -(-n // 2)
    return n


def ref_gru_input_dim(feature_dim: int) -> int:
    """Width of the flattened conv-stack output fed to the reference GRU."""
    return REF_FILTERS[-1] * _ceil_halvings(feature_dim, len(REF_FILTERS))


def _bn(prefix: str, channels: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.bn_{s}", (channels,)) for s in ("mean", "var", "gamma", "beta")]


def _rnn(prefix: str, d_in: int, hidden: int, gates: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w_ih", (d_in, gates * hidden)), (f"{prefix}.w_hh", (hidden, gates * hidden)),
            (f"{prefix}.b_ih", (gates * hidden,)), (f"{prefix}.b_hh", (gates * hidden,))]


def _ref_encoder(prefix: str, feature_dim: int, gru_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    c_in = 1
    for i, c_out in enumerate(REF_FILTERS):
        out += [(f"{prefix}.conv{i}.w", (c_out, c_in, 3, 3)), (f"{prefix}.conv{i}.b", (c_out,))]
        out += _bn(f"{prefix}.conv{i}", c_out)
        c_in = c_out
    out += _rnn(f"{prefix}.gru", ref_gru_input_dim(feature_dim), gru_dim, 3)
    out += [(f"{prefix}.fc.w", (gru_dim, REF_EMBED_DIM)), (f"{prefix}.fc.b", (REF_EMBED_DIM,))]
    return out


def weight_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every tensor name and shape the model needs, in file order."""
    c = config
    m: list[tuple[str, tuple[int, ...]]] = [("embedding", (c.n_phonemes, ENCODER_DIM))]
    for i in range(c.encoder_convs):
        m += [(f"encoder.conv{i}.w", (ENCODER_DIM, ENCODER_DIM, c.encoder_kernel)),
              (f"encoder.conv{i}.b", (ENCODER_DIM,))]
        m += _bn(f"encoder.conv{i}", ENCODER_DIM)
    half = ENCODER_DIM // 2
    m += _rnn("encoder.lstm_fw", ENCODER_DIM, half, 4)
    m += _rnn("encoder.lstm_bw", ENCODER_DIM, half, 4)
    # one context reference encoder serves both neighbours
    m += _ref_encoder("context_ref", ENCODER_DIM, c.ref_gru_dim)
    m += _ref_encoder("acoustic_ref", N_MELS, c.ref_gru_dim)
    m += [("context_tokens", (N_TOKENS, CONTEXT_DIM)),
          ("context_attn.w_query", (2 * REF_EMBED_DIM, CONTEXT_DIM)),
          ("context_attn.w_key", (CONTEXT_DIM, CONTEXT_DIM)),
          ("acoustic_tokens", (N_TOKENS, ACOUSTIC_DIM)),
          ("acoustic_attn.w_query", (REF_EMBED_DIM, ACOUSTIC_DIM)),
          ("acoustic_attn.w_key", (ACOUSTIC_DIM, ACOUSTIC_DIM))]
    m += [("decoder.prenet.0.w", (N_MELS, c.prenet_dim)), ("decoder.prenet.0.b", (c.prenet_dim,)),
          ("decoder.prenet.1.w", (c.prenet_dim, c.prenet_dim)), ("decoder.prenet.1.b", (c.prenet_dim,))]
    m += _rnn("decoder.attention_rnn", c.prenet_dim + CONDITION_DIM, c.attention_rnn_dim, 4)
    m += [("decoder.attention.w_query", (c.attention_rnn_dim, c.attention_dim)),
          ("decoder.attention.w_memory", (CONDITION_DIM, c.attention_dim)),
          ("decoder.attention.location_conv", (c.location_filters, 2, c.location_kernel)),
          ("decoder.attention.location_dense", (c.location_filters, c.attention_dim)),
          ("decoder.attention.v", (c.attention_dim,))]
    m += _rnn("decoder.decoder_rnn", c.attention_rnn_dim + CONDITION_DIM, c.decoder_rnn_dim, 4)
    proj_in = c.decoder_rnn_dim + CONDITION_DIM
    m += [("decoder.mel_proj.w", (proj_in, N_MELS)), ("decoder.mel_proj.b", (N_MELS,)),
          ("decoder.stop_proj.w", (proj_in, 1)), ("decoder.stop_proj.b", (1,))]
    for i in range(c.postnet_layers):
        c_in = N_MELS if i == 0 else c.postnet_channels
        c_out = N_MELS if i == c.postnet_layers - 1 else c.postnet_channels
        m += [(f"decoder.postnet.{i}.w", (c_out, c_in, c.postnet_kernel)), (f"decoder.postnet.{i}.b", (c_out,))]
        m += _bn(f"decoder.postnet.{i}", c_out)
    return m


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        manifest = weight_manifest(self.config)
        expected = dict(manifest)
        missing = [n for n in expected if n not in self.tensors]
        extra = [n for n in self.tensors if n not in expected]
        if missing or extra:
            raise FormatError(f"weights do not match manifest: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape in manifest:
            arr = self.tensors[name]
            if tuple(arr.shape) != shape:
                raise FormatError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
            if not np.isfinite(arr).all():
                raise FormatError(f"tensor {name!r} has non-finite values")
        # freeze: weights are shared read-only between workers
        ordered = {}
        for name, _ in manifest:
            arr = np.array(self.tensors[name], dtype=F32, order="C")
            arr.setflags(write=False)
            ordered[name] = arr
        object.__setattr__(self, "tensors", ordered)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def gru(self, prefix: str) -> GRUParams:
        t = self.tensors
        return GRUParams(t[f"{prefix}.w_ih"], t[f"{prefix}.w_hh"], t[f"{prefix}.b_ih"], t[f"{prefix}.b_hh"])

    def lstm(self, prefix: str) -> LSTMParams:
        t = self.tensors
        return LSTMParams(t[f"{prefix}.w_ih"], t[f"{prefix}.w_hh"], t[f"{prefix}.b_ih"], t[f"{prefix}.b_hh"])

    def bn(self, prefix: str):
        t = self.tensors
        return tuple(t[f"{prefix}.bn_{s}"] for s in ("mean", "var", "gamma", "beta"))

    @property
    def parameter_count(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def save(self, path: str | Path) -> None:
        write_tensors(path, self.tensors)

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        tensors = read_tensors(path)
        config = ModelConfig.from_shapes({k: v.shape for k, v in tensors.items()})
        return cls(config, tensors)


def init_model_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights; batch-norm statistics start at identity (mean 0, var 1, gamma 1, beta 0)."""
    manifest = weight_manifest(config)
    random_part = [(n, s) for n, s in manifest if ".bn_" not in n]
    tensors = nn.init_weights(random_part, nn.SeededRng(seed))
    for name, shape in manifest:
        if ".bn_" in name:
            fill = 1.0 if name.endswith(("bn_var", "bn_gamma")) else 0.0
            tensors[name] = np.full(shape, fill, dtype=F32)
    return ModelWeights(config, tensors)


# -- encoder and embeddings ---------------------------------------------------------


def encode_phrase(phonemes: PhonemeSequence | Sequence[int], weights: ModelWeights) -> np.ndarray:
    """Phoneme IDs -> [T, 512]: embedding, conv stack, bidirectional LSTM."""
    ids = np.asarray(getattr(phonemes, "phonemes", phonemes), dtype=np.int64)
    n_ph = weights.config.n_phonemes
    if ids.ndim != 1 or ids.size == 0:
        raise UnknownPhonemeId("empty phoneme sequence")
    if ids.min() < 0 or ids.max() >= n_ph:
        raise UnknownPhonemeId(f"phoneme id outside [0, {n_ph})")
    x = weights["embedding"][ids]
    for i in range(weights.config.encoder_convs):
        p = f"encoder.conv{i}"
        x = nn.conv1d(x, weights[f"{p}.w"], weights[f"{p}.b"])
        x = nn.relu(nn.batch_norm_inference(x, *weights.bn(p), eps=BN_EPS, axis=1))
    fw, _ = nn.lstm_forward(x, weights.lstm("encoder.lstm_fw"))
    bw, _ = nn.lstm_forward(x[::-1], weights.lstm("encoder.lstm_bw"))
    return np.concatenate([fw, bw[::-1]], axis=1)


def reference_encode(inputs: np.ndarray, weights: ModelWeights, prefix: str) -> np.ndarray:
    """[T, D] -> 128-d probability vector via six stride-2 convs, a GRU and softmax.

    ``prefix`` selects the parameter set: ``context_ref`` (D=512) or
    ``acoustic_ref`` (D=80).
    """
    x = np.asarray(inputs, dtype=F32)
    expected_d = ENCODER_DIM if prefix == "context_ref" else N_MELS
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != expected_d:
        raise ShapeMismatch(f"{prefix}: expected [T>=1, {expected_d}], got {x.shape}")
    out = x[None]
    for i in range(len(REF_FILTERS)):
        p = f"{prefix}.conv{i}"
        out = nn.conv2d(out, weights[f"{p}.w"], weights[f"{p}.b"])
        out = nn.relu(nn.batch_norm_inference(out, *weights.bn(p), eps=BN_EPS, axis=0))
    c, t, d = out.shape
    seq = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(t, c * d)
    _, h = nn.gru_forward(seq, weights.gru(f"{prefix}.gru"))
    return nn.softmax(nn.linear(h, weights[f"{prefix}.fc.w"], weights[f"{prefix}.fc.b"]))


def token_attention(query, table, w_query, w_key) -> tuple[np.ndarray, np.ndarray]:
    """Attend over a token table; tanh(table) serves as keys and values.

    Returns (embedding [D_tok], weights [n_tokens]).
    """
    tokens = nn.tanh_op(table)
    return nn.dot_attention(query, tokens, tokens, w_query, w_key)


def context_query(prev: np.ndarray | None, nxt: np.ndarray | None, weights: ModelWeights) -> np.ndarray:
    """[e_prev ‖ e_next]; an absent neighbour contributes zeros."""
    def enc(x):
        if x is None:
            return np.zeros(REF_EMBED_DIM, F32)
        return reference_encode(x, weights, "context_ref")
    return np.concatenate([enc(prev), enc(nxt)])


def context_embed(prev: np.ndarray | None, nxt: np.ndarray | None, weights: ModelWeights) -> np.ndarray:
    query = context_query(prev, nxt, weights)
    emb, _ = token_attention(query, weights["context_tokens"],
                             weights["context_attn.w_query"], weights["context_attn.w_key"])
    return emb


def acoustic_embed(reference_mel: np.ndarray, weights: ModelWeights) -> np.ndarray:
    mel = np.asarray(reference_mel, dtype=F32)
    if mel.ndim != 2 or mel.shape[0] < 1 or mel.shape[1] != N_MELS:
        raise ShapeMismatch(f"reference mel must be [F>=1, {N_MELS}], got {mel.shape}")
    query = reference_encode(mel, weights, "acoustic_ref")
    emb, _ = token_attention(query, weights["acoustic_tokens"],
                             weights["acoustic_attn.w_query"], weights["acoustic_attn.w_key"])
    return emb


def condition_concat(enc: np.ndarray, ctx: np.ndarray, ac: np.ndarray) -> np.ndarray:
    """[T, 512] ‖ [256] ‖ [128] -> [T, 896] with the embeddings repeated on every row."""
    enc, ctx, ac = (np.asarray(a, dtype=F32) for a in (enc, ctx, ac))
    if enc.ndim != 2 or enc.shape[1] != ENCODER_DIM or ctx.shape != (CONTEXT_DIM,) or ac.shape != (ACOUSTIC_DIM,):
        raise ShapeMismatch(f"condition_concat: got {enc.shape}, {ctx.shape}, {ac.shape}")
    T = enc.shape[0]
    cond = np.concatenate([ctx, ac])
    return np.concatenate([enc, np.broadcast_to(cond, (T, cond.size))], axis=1)


# -- decoder ----------------------------------------------------------------------


class StopReason(str, Enum):
    STOP_TOKEN = "STOP_TOKEN"
    FRAME_LIMIT = "FRAME_LIMIT"


@dataclass(frozen=True)
class DecoderLimits:
    max_frames: int | None = None  # None: 30 frames per memory row
    stop_threshold: float = 0.5
    frames_per_phoneme: int = 30

    def frames_for(self, n_phonemes: int) -> int:
        if self.max_frames is not None:
            return self.max_frames
        return self.frames_per_phoneme * n_phonemes

    def to_dict(self):
        return asdict(self)


@dataclass
class DecodeResult:
    mel: np.ndarray  # [F, 80] after postnet
    stopped_by: StopReason
    alignments: np.ndarray | None = None  # [F, T] attention weights per step

    @property
    def frames(self) -> int:
        return self.mel.shape[0]


def decode_mel(memory: np.ndarray, weights: ModelWeights, limits: DecoderLimits = DecoderLimits(),
               keep_alignments: bool = False) -> DecodeResult:
    """Autoregressive mel generation over a conditioned memory [T, 896]."""
    memory = np.asarray(memory, dtype=F32)
    if memory.ndim != 2 or memory.shape[1] != CONDITION_DIM or memory.shape[0] < 1:
        raise ShapeMismatch(f"memory must be [T>=1, {CONDITION_DIM}], got {memory.shape}")
    max_frames = limits.frames_for(memory.shape[0])
    if max_frames < 1:
        raise ValueError("max_frames must be >= 1")
    cfg = weights.config
    w = weights.tensors
    att_rnn, dec_rnn = weights.lstm("decoder.attention_rnn"), weights.lstm("decoder.decoder_rnn")
    pre0w, pre0b, pre1w, pre1b = (w[f"decoder.prenet.{k}"] for k in ("0.w", "0.b", "1.w", "1.b"))
    w_query, v = w["decoder.attention.w_query"], w["decoder.attention.v"]
    loc_conv, loc_dense = w["decoder.attention.location_conv"], w["decoder.attention.location_dense"]
    mel_w, mel_b = w["decoder.mel_proj.w"], w["decoder.mel_proj.b"]
    stop_w, stop_b = w["decoder.stop_proj.w"], w["decoder.stop_proj.b"]

    T = memory.shape[0]
    processed_memory = memory @ w["decoder.attention.w_memory"]
    att_state = (np.zeros(cfg.attention_rnn_dim, F32), np.zeros(cfg.attention_rnn_dim, F32))
    dec_state = (np.zeros(cfg.decoder_rnn_dim, F32), np.zeros(cfg.decoder_rnn_dim, F32))
    att_w = np.zeros(T, F32)
    att_cum = np.zeros(T, F32)
    context = np.zeros(CONDITION_DIM, F32)
    prev = np.zeros(N_MELS, F32)
    frames, aligns = [], []
    stopped = StopReason.FRAME_LIMIT
    for _ in range(max_frames):
        p = nn.relu(nn.relu(prev @ pre0w + pre0b) @ pre1w + pre1b)
        att_state = nn.lstm_cell(np.concatenate([p, context]), att_state, att_rnn)
        loc = nn.conv1d(np.stack([att_w, att_cum], axis=1), loc_conv) @ loc_dense
        energies = np.tanh(att_state[0] @ w_query + loc + processed_memory) @ v
        att_w = nn.softmax(energies)
        att_cum = att_cum + att_w
        context = att_w @ memory
        dec_state = nn.lstm_cell(np.concatenate([att_state[0], context]), dec_state, dec_rnn)
        out_in = np.concatenate([dec_state[0], context])
        frame = out_in @ mel_w + mel_b
        stop_logit = out_in @ stop_w + stop_b
        frames.append(frame)
        if keep_alignments:
            aligns.append(att_w)
        prev = frame
        if nn.sigmoid(stop_logit)[0] > limits.stop_threshold:
            stopped = StopReason.STOP_TOKEN
            break
    mel = np.stack(frames)
    mel = mel + postnet(mel, weights)
    return DecodeResult(mel, stopped, np.stack(aligns) if keep_alignments else None)


def postnet(mel: np.ndarray, weights: ModelWeights) -> np.ndarray:
    x = mel
    n = weights.config.postnet_layers
    for i in range(n):
        p = f"decoder.postnet.{i}"
        x = nn.conv1d(x, weights[f"{p}.w"], weights[f"{p}.b"])
        x = nn.batch_norm_inference(x, *weights.bn(p), eps=BN_EPS, axis=1)
        if i < n - 1:
            x = np.tanh(x)
    return x
