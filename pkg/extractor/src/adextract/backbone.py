"""CLIP backbone loading.

Two paths: ``from_pretrained`` on a checkpoint identifier/path, or a
randomly initialized model with the ViT-L/14@336 geometry at a
configurable depth (``random_init``). The second exists for offline use
and tests: every contract property of the exported files — shapes,
dtypes, byte-stable re-extraction, manifest schema — is independent of
what the weights are.
"""

import logging
from dataclasses import dataclass

import torch
from tokenizers import pre_tokenizers
from transformers import (
    AutoTokenizer,
    CLIPConfig,
    CLIPModel,
    CLIPTextConfig,
    CLIPTokenizer,
    CLIPVisionConfig,
)

from .config import ExtractionConfig
from .errors import ConfigError

logger = logging.getLogger("adextract")

# ViT-L/14 at 336 px
VISION_WIDTH = 1024
JOINT_WIDTH = 768
PATCH_SIZE = 14
TEXT_WIDTH = 768
MAX_TEXT_TOKENS = 77


@dataclass
class Backbone:
    model: CLIPModel
    tokenizer: object
    grid: tuple[int, int]
    visual_width: int
    joint_width: int
    depth: int


def offline_tokenizer() -> CLIPTokenizer:
    """Character-level CLIP tokenizer built without any downloaded files.

    The vocabulary is the byte-level alphabet (plus the two specials and
    the ``</w>`` word-final variants) with no merges, so every word
    splits into single characters. Token ids are meaningless next to the
    pretrained vocabulary — which is fine, because this tokenizer is only
    ever paired with randomly initialized weights.
    """
    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for char in alphabet:
        vocab[char] = len(vocab)
    for char in alphabet:
        vocab[char + "</w>"] = len(vocab)
    return CLIPTokenizer(vocab=vocab, merges=[])


def _random_config(config: ExtractionConfig, vocab_size: int) -> CLIPConfig:
    vision = CLIPVisionConfig(
        hidden_size=VISION_WIDTH,
        intermediate_size=4 * VISION_WIDTH,
        num_hidden_layers=config.depth,
        num_attention_heads=16,
        image_size=config.image_size,
        patch_size=PATCH_SIZE,
        projection_dim=JOINT_WIDTH,
    )
    text = CLIPTextConfig(
        hidden_size=TEXT_WIDTH,
        intermediate_size=4 * TEXT_WIDTH,
        num_hidden_layers=config.text_depth,
        num_attention_heads=12,
        max_position_embeddings=MAX_TEXT_TOKENS,
        projection_dim=JOINT_WIDTH,
        vocab_size=vocab_size,
        bos_token_id=0,
        eos_token_id=1,
        pad_token_id=1,
    )
    return CLIPConfig(
        text_config=text.to_dict(), vision_config=vision.to_dict(),
        projection_dim=JOINT_WIDTH,
    )


def load_backbone(config: ExtractionConfig) -> Backbone:
    # Fixed math modes: single-threaded CPU inference is reproducible
    # bit-for-bit, which the byte-stable re-extraction contract needs.
    torch.set_num_threads(1)

    if config.random_init:
        tokenizer = offline_tokenizer()
        torch.manual_seed(config.seed)
        model = CLIPModel(_random_config(config, vocab_size=tokenizer.vocab_size))
        logger.info(
            "random-init backbone: depth %d/%d, seed %d",
            config.depth, config.text_depth, config.seed,
        )
    else:
        try:
            model = CLIPModel.from_pretrained(config.model)
            tokenizer = AutoTokenizer.from_pretrained(config.model)
        except OSError as exc:
            raise ConfigError(
                f"cannot load model '{config.model}' (offline? try --random-init): {exc}"
            ) from None

    model.eval()
    model.requires_grad_(False)

    vision_cfg = model.config.vision_config
    if config.image_size % vision_cfg.patch_size != 0:
        raise ConfigError(
            f"image size {config.image_size} is not a multiple of "
            f"patch size {vision_cfg.patch_size}"
        )
    if vision_cfg.image_size != config.image_size:
        raise ConfigError(
            f"model expects {vision_cfg.image_size} px input, config says "
            f"{config.image_size}"
        )
    depth = vision_cfg.num_hidden_layers
    for name, value in (("layer-l", config.layer_l), ("layer-lp", config.layer_lp)):
        if value > depth:
            raise ConfigError(f"{name}={value} exceeds model depth {depth}")

    side = config.image_size // vision_cfg.patch_size
    return Backbone(
        model=model,
        tokenizer=tokenizer,
        grid=(side, side),
        visual_width=vision_cfg.hidden_size,
        joint_width=model.config.projection_dim,
        depth=depth,
    )
