"""Adaptive class prompts: intervened concept tokens plus learnable context.

For a class y and (in conditional modes) an image embedding z, the pipeline
is: bank sequence -> bilateral intervention -> low-rank projection into the
prompt width -> concatenation with the shared context tokens -> class token
and end-of-sequence row -> frozen text encoder. The resulting class
embeddings score images by scaled cosine similarity, trained with the same
contrastive objective the encoders were pre-trained with, except that only
prompt-side parameters move.

Run modes:
  cilmp            full conditional intervention with the matching prior
  no_rd            conditional, but the projected embedding is broadcast raw
  no_conditional   image-independent intervention
  no_intervention  concept tokens are only projected and concatenated
  coop_baseline    no concept tokens at all (context + class name only)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamRegistry, Tensor
from .concepts import ConceptBank
from .encoders import PREAMBLE_TOKENS, DualEncoder, TextSequence
from .errors import ConfigError, DimensionError, LengthError
from .intervention import (
    InterventionParams,
    PositionSets,
    ZProjection,
    apply_bilateral,
    init_intervention_params,
    init_z_projection,
)

RUN_MODES = ("cilmp", "no_rd", "no_conditional", "no_intervention", "coop_baseline", "text_mode")

# (bilateral mode, matching prior) per run mode; text_mode shares the cilmp
# wiring and differs only in the bank the harness supplies.
_WIRING = {
    "cilmp": ("conditional", True),
    "text_mode": ("conditional", True),
    "no_rd": ("conditional", False),
    "no_conditional": ("unconditional", True),
    "no_intervention": ("identity", True),
    "coop_baseline": (None, True),
}


@dataclass
class ProjectionParams:
    """Low-rank map from concept width to prompt width (up @ down)."""

    down: Tensor  # (rank, concept_width)
    up: Tensor  # (prompt_width, rank)

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2 or self.up.shape[1] != self.down.shape[0]:
            raise DimensionError(f"projection factors {self.up.shape} and {self.down.shape} do not chain")


@dataclass
class PromptContext:
    """Learnable context tokens (per deep layer, text and image sides) plus
    the frozen class-name and end-of-sequence embedding rows."""

    text_layers: list[Tensor]
    image_layers: list[Tensor]
    class_rows: Tensor
    eos_row: Tensor


@dataclass
class AdaptivePrompt:
    """Concept tokens followed by context tokens for one class."""

    tokens: Tensor
    class_index: int


def build_base_prompt(class_index: int, ctx: PromptContext) -> tuple[Tensor, Tensor]:
    """Shared first-layer context tokens and the frozen class embedding row."""
    if not 0 <= class_index < ctx.class_rows.shape[0]:
        raise IndexError(f"class index {class_index} out of range [0, {ctx.class_rows.shape[0]})")
    return ctx.text_layers[0], ctx.class_rows[class_index : class_index + 1]


def project(h_seq: Tensor, proj: ProjectionParams) -> Tensor:
    """Map every concept row through the low-rank projection."""
    if h_seq.ndim != 2 or h_seq.shape[1] != proj.down.shape[1]:
        raise DimensionError(f"sequence {h_seq.shape} vs projection input width {proj.down.shape[1]}")
    return ad.matmul(ad.matmul(h_seq, ad.transpose(proj.down)), ad.transpose(proj.up))


def assemble(h_tilde: Tensor, class_index: int, ctx: PromptContext) -> AdaptivePrompt:
    """Concatenate projected concept tokens with the shared context."""
    v0, _ = build_base_prompt(class_index, ctx)
    if h_tilde.shape[1] != v0.shape[1]:
        raise DimensionError(f"concept tokens width {h_tilde.shape[1]} vs context width {v0.shape[1]}")
    return AdaptivePrompt(tokens=ad.concat([h_tilde, v0], axis=0), class_index=class_index)


class PromptModel:
    """Everything trainable in the prompt-tuning phase, for one run mode."""

    def __init__(
        self,
        encoders: DualEncoder,
        bank: ConceptBank | None,
        mode: str,
        context_len: int,
        positions: PositionSets,
        r_sub: int = 8,
        r_proj: int = 8,
        r_z: int = 8,
        seed: int = 0,
    ):
        if mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {RUN_MODES}")
        if context_len < 1:
            raise ConfigError("context length must be at least 1")
        self.encoders = encoders
        self.bank = bank
        self.mode = mode
        self.context_len = context_len
        self.positions = positions
        cfg = encoders.config
        if mode == "coop_baseline":
            if bank is None:
                raise ConfigError("class count comes from the bank even in the baseline mode")
        else:
            if bank is None:
                raise ConfigError(f"mode {mode!r} needs a concept bank")
            positions.validate_for(bank.seq_len)
        self.num_classes = bank.num_classes
        if self.num_classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        concept_rows = 0 if mode == "coop_baseline" else bank.seq_len
        total_len = concept_rows + context_len + 2
        if total_len > cfg.text_max_len:
            raise LengthError(
                f"prompt of {total_len} tokens exceeds text_max_len={cfg.text_max_len}"
            )

        self.registry = ParamRegistry()
        d_p = cfg.embed_dim
        depth = cfg.deep_prompt_layers

        # first-layer text context starts from the reserved preamble rows
        # (cycled to the requested length); deeper layers and the image side
        # start from N(0, 0.02^2)
        preamble = encoders.token_table.data[list(PREAMBLE_TOKENS)]
        v0 = np.stack([preamble[i % len(PREAMBLE_TOKENS)] for i in range(context_len)])
        text_layers = [self.registry.register("ctx.text.0", Tensor(v0.copy(), requires_grad=True))]
        rng_text = np.random.default_rng([seed, 1])
        for k in range(1, depth):
            text_layers.append(
                self.registry.register(
                    f"ctx.text.{k}", Tensor(rng_text.normal(size=(context_len, d_p)) * 0.02, requires_grad=True)
                )
            )
        rng_image = np.random.default_rng([seed, 2])
        image_layers = [
            self.registry.register(
                f"ctx.image.{k}", Tensor(rng_image.normal(size=(context_len, d_p)) * 0.02, requires_grad=True)
            )
            for k in range(depth)
        ]
        class_tokens = np.array([encoders.class_caption(c)[-2] for c in range(self.num_classes)])
        class_rows = Tensor(encoders.token_table.data[class_tokens].copy())
        class_rows.frozen = True
        eos_row = Tensor(encoders.token_table.data[0:1].copy())
        eos_row.frozen = True
        self.ctx = PromptContext(
            text_layers=text_layers, image_layers=image_layers, class_rows=class_rows, eos_row=eos_row
        )

        self.proj: ProjectionParams | None = None
        self.prefix: InterventionParams | None = None
        self.suffix: InterventionParams | None = None
        self.zproj: ZProjection | None = None
        if mode != "coop_baseline":
            rng_proj = np.random.default_rng([seed, 3])
            # small symmetric init: concept tokens start near zero (the
            # prompt begins close to its context-only baseline) but both
            # factors receive gradients from the first step
            self.proj = ProjectionParams(
                down=self.registry.register(
                    "proj.down", Tensor(rng_proj.normal(size=(r_proj, bank.width)) * 0.02, requires_grad=True)
                ),
                up=self.registry.register(
                    "proj.up", Tensor(rng_proj.normal(size=(d_p, r_proj)) * 0.02, requires_grad=True)
                ),
            )
        if mode in ("cilmp", "text_mode", "no_rd", "no_conditional"):
            conditional = mode != "no_conditional"
            for name, stream in (("prefix", 4), ("suffix", 5)):
                params = init_intervention_params(np.random.default_rng([seed, stream]), r_sub, bank.width, conditional)
                self.registry.register(f"interv.{name}.basis", params.basis)
                self.registry.register(f"interv.{name}.weight", params.weight)
                self.registry.register(f"interv.{name}.bias", params.bias)
                setattr(self, name, params)
        if mode in ("cilmp", "text_mode", "no_rd"):
            self.zproj = init_z_projection(np.random.default_rng([seed, 6]), bank.width, r_z, d_p)
            self.registry.register("zproj.up", self.zproj.up)
            self.registry.register("zproj.down", self.zproj.down)

    @property
    def needs_image_condition(self) -> bool:
        return _WIRING[self.mode][0] == "conditional"

    def encode_image(self, x) -> Tensor:
        """Image embedding with this model's deep image prompts injected."""
        return self.encoders.encode_image(x, deep_prompts=self.ctx.image_layers)

    def adapted_concept_tokens(self, class_index: int, z: Tensor | None) -> Tensor:
        bilateral_mode, matching = _WIRING[self.mode]
        h_seq = self.bank.class_sequence(class_index)
        h_bar = apply_bilateral(
            h_seq, z, self.prefix, self.suffix, self.zproj, self.positions, bilateral_mode, matching_prior=matching
        )
        return project(h_bar, self.proj)

    def prompt_embedding(self, class_index: int, z: Tensor | None = None) -> Tensor:
        """Text embedding of the adaptive prompt for one class.

        Conditional modes require the querying image's embedding ``z``.
        """
        if self.needs_image_condition and z is None:
            raise ConfigError(f"mode {self.mode!r} conditions prompts on an image embedding")
        if self.mode == "coop_baseline":
            tokens = self.ctx.text_layers[0]
            concept_rows = 0
        else:
            prompt = assemble(self.adapted_concept_tokens(class_index, z), class_index, self.ctx)
            tokens = prompt.tokens
            concept_rows = self.bank.seq_len
        _, class_row = build_base_prompt(class_index, self.ctx)
        embeddings = ad.concat([tokens, class_row, self.ctx.eos_row], axis=0)
        seq = TextSequence(
            token_embeddings=embeddings,
            eos_index=embeddings.shape[0] - 1,
            prompt_start=concept_rows,
        )
        return self.encoders.encode_text(seq, deep_prompts=self.ctx.text_layers)

    def _class_matrix(self, z: Tensor) -> Tensor:
        """(num_classes, embed_dim) prompt embeddings for one image."""
        cond = z if self.needs_image_condition else None
        return ad.stack_rows([self.prompt_embedding(c, cond) for c in range(self.num_classes)])

    def loss(self, images, labels) -> Tensor:
        """Contrastive objective over a batch: match each image to its class prompt."""
        labels = np.asarray(labels, dtype=np.int64)
        if len(images) < 1:
            raise ConfigError("empty batch")
        inv_tau = self.encoders.inv_temperature()
        shared_w = None if self.needs_image_condition else self._class_matrix(None)
        rows = []
        for x in images:
            z = self.encode_image(x)
            w = self._class_matrix(z) if shared_w is None else shared_w
            rows.append(ad.reshape(ad.matvec(w, z), (1, self.num_classes)))
        logits = ad.mul(ad.concat(rows, axis=0), inv_tau)
        return ad.softmax_cross_entropy(logits, labels)

    def predict(self, x) -> tuple[np.ndarray, int]:
        """Class probabilities and the argmax label for one image."""
        z = self.encode_image(x)
        w = self._class_matrix(z)
        logits = ad.mul(ad.matvec(w, z), self.encoders.inv_temperature()).data
        shifted = np.exp(logits - logits.max())
        probs = shifted / shifted.sum()
        return probs, int(np.argmax(probs))

    def trainable_param_count(self) -> int:
        return self.registry.total_size()

    def trainable(self) -> list[Tensor]:
        return self.registry.tensors()


def expected_param_count(
    mode: str,
    deep_layers: int,
    context_len: int,
    embed_dim: int,
    concept_width: int,
    r_sub: int,
    r_proj: int,
    r_z: int,
) -> int:
    """Analytic trainable-parameter count; must equal the registry walk."""
    if mode not in RUN_MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    count = 2 * deep_layers * context_len * embed_dim  # text + image context
    if mode == "coop_baseline":
        return count
    count += r_proj * concept_width + embed_dim * r_proj
    if mode in ("cilmp", "text_mode", "no_rd", "no_conditional"):
        in_dim = concept_width if mode == "no_conditional" else 2 * concept_width
        count += 2 * (r_sub * concept_width + r_sub * in_dim + r_sub)
    if mode in ("cilmp", "text_mode", "no_rd"):
        count += concept_width * r_z + r_z * embed_dim
    return count
