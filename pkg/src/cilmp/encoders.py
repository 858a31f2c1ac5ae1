"""Toy dual-encoder vision-language model.

The image encoder pools a learnable classification token over pre-tokenized
feature rows; the text encoder reads the hidden state at the end-of-sequence
position under causal attention. Both are small pre-norm transformer stacks
with single-head attention and a tanh MLP, emit l2-normalized embeddings,
and support deep prompting: for the first ``deep_prompt_layers`` blocks, a
designated slot range of the sequence is overwritten with that layer's
injected prompt tokens before attention runs.

There are no positional embeddings: the causal mask supplies order
sensitivity on the text side and image tokens are an unordered feature bag,
which keeps shallow prompting exactly equal to depth-1 deep prompting.

Contrastive pre-training uses the symmetric InfoNCE objective with a
learnable temperature held in log space, after which ``freeze`` locks every
parameter and fingerprints them with a 64-bit checksum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .errors import ConfigError, DimensionError, FormatError, LengthError

ENCODER_MAGIC = b"CILMPENC1"

# reserved vocabulary rows
EOS_TOKEN = 0
PREAMBLE_TOKENS = (1, 2, 3, 4)  # the canonical "a photo of a" analog
FIRST_CLASS_TOKEN = 5


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    num_layers: int = 2
    hidden_dim: int = 128
    image_tokens: int = 16
    text_max_len: int = 48
    vocab_size: int = 64
    deep_prompt_layers: int | None = None

    def __post_init__(self):
        for name in ("embed_dim", "num_layers", "hidden_dim", "image_tokens", "text_max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.deep_prompt_layers is None:
            object.__setattr__(self, "deep_prompt_layers", self.num_layers)
        if not 1 <= self.deep_prompt_layers <= self.num_layers:
            raise ConfigError(
                f"deep_prompt_layers {self.deep_prompt_layers} outside [1, {self.num_layers}]"
            )

    def to_ints(self) -> tuple[int, ...]:
        return (
            self.embed_dim,
            self.num_layers,
            self.hidden_dim,
            self.image_tokens,
            self.text_max_len,
            self.vocab_size,
            self.deep_prompt_layers,
        )

    @classmethod
    def from_ints(cls, ints) -> "EncoderConfig":
        return cls(*[int(v) for v in ints])


@dataclass(frozen=True)
class FrozenFlag:
    frozen: bool
    checksum: int


@dataclass
class TextSequence:
    """Embedded token sequence; the output is read at ``eos_index``.

    ``prompt_start`` marks where the designated prompt slots begin when
    deep prompting is in use.
    """

    token_embeddings: Tensor
    eos_index: int
    prompt_start: int | None = None

    def __post_init__(self):
        if self.token_embeddings.ndim != 2:
            raise DimensionError(f"sequence embeddings must be 2-D, got {self.token_embeddings.shape}")
        if not 0 <= self.eos_index < self.token_embeddings.shape[0]:
            raise DimensionError(
                f"eos_index {self.eos_index} outside sequence of length {self.token_embeddings.shape[0]}"
            )


class _Block:
    """Pre-norm transformer block with single-head attention."""

    def __init__(self, reg: ParamRegistry, prefix: str, d: int, hidden: int, rng: np.random.Generator):
        def w(name, shape, std=0.02):
            return reg.register(f"{prefix}.{name}", Tensor(rng.normal(size=shape) * std, requires_grad=True))

        def const(name, value):
            return reg.register(f"{prefix}.{name}", Tensor(value, requires_grad=True))

        self.d = d
        self.ln1_g = const("ln1_gain", np.ones(d))
        self.ln1_b = const("ln1_bias", np.zeros(d))
        self.wq = w("wq", (d, d))
        self.wk = w("wk", (d, d))
        self.wv = w("wv", (d, d))
        self.wo = w("wo", (d, d))
        self.ln2_g = const("ln2_gain", np.ones(d))
        self.ln2_b = const("ln2_bias", np.zeros(d))
        self.w1 = w("mlp_w1", (d, hidden))
        self.b1 = const("mlp_b1", np.zeros(hidden))
        self.w2 = w("mlp_w2", (hidden, d))
        self.b2 = const("mlp_b2", np.zeros(d))

    def forward(self, x: Tensor, causal: bool) -> Tensor:
        a = ad.layer_norm(x, self.ln1_g, self.ln1_b)
        q = ad.matmul(a, self.wq)
        k = ad.matmul(a, self.wk)
        v = ad.matmul(a, self.wv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.d))
        mask = np.tril(np.ones((x.shape[0], x.shape[0]), dtype=bool)) if causal else None
        attended = ad.matmul(ad.softmax_rows(scores, mask=mask), v)
        x = ad.add(x, ad.matmul(attended, self.wo))
        m = ad.layer_norm(x, self.ln2_g, self.ln2_b)
        h = ad.tanh(ad.add_rowvec(ad.matmul(m, self.w1), self.b1))
        return ad.add(x, ad.add_rowvec(ad.matmul(h, self.w2), self.b2))


def _splice_rows(seq: Tensor, start: int, block: Tensor) -> Tensor:
    """Replace rows [start, start+len(block)) of seq with block."""
    n = block.shape[0]
    if start < 0 or start + n > seq.shape[0]:
        raise DimensionError(f"prompt slots [{start}, {start + n}) outside sequence of {seq.shape[0]} rows")
    parts = []
    if start > 0:
        parts.append(seq[:start])
    parts.append(block)
    if start + n < seq.shape[0]:
        parts.append(seq[start + n :])
    return ad.concat(parts, axis=0)


class _Stack:
    def __init__(self, reg, prefix, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.blocks = [
            _Block(reg, f"{prefix}.block{i}", cfg.embed_dim, cfg.hidden_dim, rng) for i in range(cfg.num_layers)
        ]
        self.lnf_g = reg.register(f"{prefix}.lnf_gain", Tensor(np.ones(cfg.embed_dim), requires_grad=True))
        self.lnf_b = reg.register(f"{prefix}.lnf_bias", Tensor(np.zeros(cfg.embed_dim), requires_grad=True))

    def forward(self, seq: Tensor, causal: bool, deep_prompts, prompt_start) -> Tensor:
        if deep_prompts is not None:
            if len(deep_prompts) > self.cfg.deep_prompt_layers:
                raise ConfigError(
                    f"{len(deep_prompts)} prompt layers exceed deep_prompt_layers={self.cfg.deep_prompt_layers}"
                )
            if prompt_start is None:
                raise ConfigError("deep prompts given without a prompt slot position")
        for i, block in enumerate(self.blocks):
            if deep_prompts is not None and i < len(deep_prompts):
                seq = _splice_rows(seq, prompt_start, deep_prompts[i])
            seq = block.forward(seq, causal)
        return ad.layer_norm(seq, self.lnf_g, self.lnf_b)


class DualEncoder:
    """Image and text encoders sharing one parameter registry and temperature."""

    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        self.registry = ParamRegistry()
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.image_cls = self.registry.register(
            "image.cls_token", Tensor(rng.normal(size=(1, d)) * 0.02, requires_grad=True)
        )
        self.image_stack = _Stack(self.registry, "image", config, rng)
        self.token_table = self.registry.register(
            "text.embedding", Tensor(rng.normal(size=(config.vocab_size, d)) * 0.02, requires_grad=True)
        )
        self.text_stack = _Stack(self.registry, "text", config, rng)
        # temperature kept in log space so 1/tau = exp(-log_tau) stays positive
        self.log_tau = self.registry.register(
            "log_tau", Tensor(np.array(np.log(1.0 / 20.0)), requires_grad=True)
        )
        self._frozen_flag: FrozenFlag | None = None

    def inv_temperature(self) -> Tensor:
        return ad.exp(ad.neg(self.log_tau))

    def encode_image(self, x, deep_prompts: list[Tensor] | None = None) -> Tensor:
        """Unit-norm embedding pooled from the learnable classification token."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.embed_dim:
            raise DimensionError(f"image tokens must be (n, {self.config.embed_dim}), got {x.shape}")
        parts = [self.image_cls]
        prompt_start = None
        if deep_prompts is not None:
            prompt_start = 1
            parts.append(deep_prompts[0])
        parts.append(x)
        seq = ad.concat(parts, axis=0)
        hidden = self.image_stack.forward(seq, causal=False, deep_prompts=deep_prompts, prompt_start=prompt_start)
        return ad.l2_normalize(hidden[0])

    def encode_text(self, seq: TextSequence, deep_prompts: list[Tensor] | None = None) -> Tensor:
        """Unit-norm embedding read at the end-of-sequence position."""
        n = seq.token_embeddings.shape[0]
        if n > self.config.text_max_len:
            raise LengthError(f"sequence of {n} tokens exceeds text_max_len={self.config.text_max_len}")
        hidden = self.text_stack.forward(
            seq.token_embeddings, causal=True, deep_prompts=deep_prompts, prompt_start=seq.prompt_start
        )
        return ad.l2_normalize(hidden[seq.eos_index])

    def sequence_from_tokens(self, token_ids) -> TextSequence:
        ids = np.asarray(token_ids, dtype=np.int64)
        emb = ad.rows(self.token_table, ids)
        eos = np.flatnonzero(ids == EOS_TOKEN)
        eos_index = int(eos[0]) if eos.size else ids.size - 1
        return TextSequence(token_embeddings=emb, eos_index=eos_index)

    def class_caption(self, class_index: int) -> np.ndarray:
        """Token ids for the canonical per-class caption."""
        tok = FIRST_CLASS_TOKEN + class_index
        if tok >= self.config.vocab_size:
            raise ConfigError(
                f"class {class_index} needs vocabulary row {tok} but vocab_size={self.config.vocab_size}"
            )
        return np.array(list(PREAMBLE_TOKENS) + [tok, EOS_TOKEN], dtype=np.int64)

    @property
    def frozen(self) -> bool:
        return self._frozen_flag is not None

    def checksum(self) -> int:
        return self.registry.checksum()

    def freeze(self) -> FrozenFlag:
        """Exclude every encoder parameter from optimization; idempotent."""
        if self._frozen_flag is None:
            self.registry.freeze()
            self._frozen_flag = FrozenFlag(frozen=True, checksum=self.registry.checksum())
        return self._frozen_flag


def clip_infonce_loss(model: DualEncoder, z_rows: list[Tensor], w_rows: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric InfoNCE over a batch of paired embeddings.

    Returns (total, image_to_text, text_to_image); total is their mean.
    Diagonal pairs are positives against all in-batch negatives.
    """
    n = len(z_rows)
    if n < 2:
        raise ConfigError("InfoNCE needs a batch of at least 2 pairs")
    z = ad.stack_rows(z_rows)
    w = ad.stack_rows(w_rows)
    sim = ad.matmul(z, ad.transpose(w))
    inv_tau = model.inv_temperature()
    targets = np.arange(n)
    loss_v = ad.softmax_cross_entropy(ad.mul(sim, inv_tau), targets)
    loss_t = ad.softmax_cross_entropy(ad.mul(ad.transpose(sim), inv_tau), targets)
    total = ad.scale(ad.add(loss_v, loss_t), 0.5)
    return total, loss_v, loss_t


def pretrain_clip(
    model: DualEncoder,
    images: list[np.ndarray],
    captions: list[np.ndarray],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    momentum: float = 0.0,
) -> list[float]:
    """Contrastively align the two encoders on (image, caption) pairs.

    Returns the per-epoch mean loss trace. Batches of one pair are a
    configuration error; a trailing singleton batch is folded into its
    predecessor. Plain SGD by default: momentum overshoots into a collapsed
    representation at this scale.
    """
    if len(images) != len(captions):
        raise ConfigError(f"{len(images)} images vs {len(captions)} captions")
    if len(images) < 2:
        raise ConfigError("pre-training needs at least 2 pairs")
    if batch_size < 2:
        raise ConfigError("InfoNCE batch size must be at least 2")
    if model.frozen:
        raise ConfigError("cannot pre-train a frozen model")
    opt = ad.SGD(trainable_parameters(model), lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    n = len(images)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for idx in _batches(order, batch_size):
            z_rows = [model.encode_image(Tensor(images[i])) for i in idx]
            w_rows = [model.encode_text(model.sequence_from_tokens(captions[i])) for i in idx]
            loss, _, _ = clip_infonce_loss(model, z_rows, w_rows)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        trace.append(float(np.mean(epoch_losses)))
    return trace


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split into batches, folding a trailing singleton into its predecessor."""
    out = []
    i = 0
    n = order.size
    while i < n:
        j = min(i + batch_size, n)
        if n - j == 1:
            j = n
        out.append(order[i:j])
        i = j
    return out


def trainable_parameters(model: DualEncoder) -> list[Tensor]:
    return [p for p in model.registry.tensors() if p.requires_grad]


def save_encoders(model: DualEncoder, path: str) -> None:
    ints = model.config.to_ints()
    with open(path, "wb") as fh:
        fh.write(ENCODER_MAGIC)
        fh.write(struct.pack(f"<{len(ints)}I", *ints))
        fh.write(model.registry.to_bytes())


def load_encoders(path: str, freeze: bool = True) -> DualEncoder:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(ENCODER_MAGIC) or raw[: len(ENCODER_MAGIC)] != ENCODER_MAGIC:
        raise FormatError("bad encoder magic", byte_offset=0)
    off = len(ENCODER_MAGIC)
    n_ints = 7
    if len(raw) < off + 4 * n_ints:
        raise FormatError("truncated encoder header", byte_offset=len(raw))
    ints = struct.unpack_from(f"<{n_ints}I", raw, off)
    off += 4 * n_ints
    try:
        config = EncoderConfig.from_ints(ints)
    except ConfigError as exc:
        raise FormatError(f"invalid encoder header: {exc}", byte_offset=len(ENCODER_MAGIC)) from exc
    model = DualEncoder(config, seed=0)
    expected = model.registry.total_size() * 8
    if len(raw) - off != expected:
        raise FormatError(
            f"parameter payload is {len(raw) - off} bytes, expected {expected}",
            byte_offset=off,
        )
    model.registry.load_bytes(raw[off:])
    if freeze:
        model.freeze()
    return model
