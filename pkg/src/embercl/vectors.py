"""Vector primitives: fusion of image/text embeddings, normalization,
cosine similarity, and the zero-shot prompt classifier."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EngineError

# Softmax sharpening applied to cosine scores during zero-shot prediction.
# Matches the logit scale a pretrained contrastive encoder converges to.
DEFAULT_TEMPERATURE = 100.0


class DimensionMismatchError(EngineError, ValueError):
    """Two vectors that must share a dimension do not."""


class UndefinedSimilarityError(EngineError, ValueError):
    """Cosine similarity requested between two zero vectors."""


class ZeroVectorWarning(UserWarning):
    """Normalizing a zero vector; it is returned unchanged."""


class FusionMode(enum.Enum):
    ADD = "add"
    MUL = "mul"
    CAT = "cat"


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float32 array, validating as it goes."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite components")
    return v


def fuse(img: np.ndarray, txt: np.ndarray, mode: FusionMode) -> np.ndarray:
    """Combine an image and a text embedding into one classifier input.

    ADD and MUL are elementwise and require equal dims; CAT appends the
    text vector after the image vector.
    """
    img = np.asarray(img, dtype=np.float32)
    txt = np.asarray(txt, dtype=np.float32)
    if mode in (FusionMode.ADD, FusionMode.MUL) and img.shape[-1] != txt.shape[-1]:
        raise DimensionMismatchError(
            f"{mode.value} fusion needs equal dims, got image dim {img.shape[-1]} "
            f"and text dim {txt.shape[-1]}"
        )
    if mode is FusionMode.ADD:
        return img + txt
    if mode is FusionMode.MUL:
        return img * txt
    return np.concatenate([img, txt], axis=-1)


def fuse_matrix(imgs: np.ndarray, txts: np.ndarray, mode: FusionMode) -> np.ndarray:
    """Row-wise `fuse` over (n, d_img) and (n, d_txt) matrices."""
    imgs = np.asarray(imgs, dtype=np.float32)
    txts = np.asarray(txts, dtype=np.float32)
    if imgs.shape[0] != txts.shape[0]:
        raise DimensionMismatchError(
            f"row count mismatch: {imgs.shape[0]} images vs {txts.shape[0]} texts"
        )
    return fuse(imgs, txts, mode)


def fused_dim(d_img: int, d_txt: int, mode: FusionMode) -> int:
    if mode is FusionMode.CAT:
        return d_img + d_txt
    if d_img != d_txt:
        raise DimensionMismatchError(
            f"{mode.value} fusion needs equal dims, got image dim {d_img} and text dim {d_txt}"
        )
    return d_img


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit Euclidean norm; a zero vector is returned unchanged
    with a ZeroVectorWarning."""
    v = np.asarray(v, dtype=np.float32)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm == 0.0:
        warnings.warn("cannot normalize a zero vector; returned unchanged", ZeroVectorWarning)
        return v.copy()
    return (v.astype(np.float64) / norm).astype(np.float32)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (||a||·||b||), accumulated in 64-bit."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatchError(
            f"cosine needs equal dims, got {a.shape[-1]} and {b.shape[-1]}"
        )
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 and nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of two zero vectors is undefined")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a64 @ b64 / (na * nb))


@dataclass(frozen=True)
class PromptSet:
    """Candidate-answer prompt embeddings for one task.

    `embeddings` is (k, d) with row i the prompt for `label_ids[i]`.
    """

    task_id: int
    label_ids: tuple[int, ...]
    embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise ValueError(f"prompt embeddings must be 2-D, got shape {emb.shape}")
        if emb.shape[0] != len(self.label_ids):
            raise ValueError(
                f"{len(self.label_ids)} label ids but {emb.shape[0]} prompt rows"
            )
        if len(set(self.label_ids)) != len(self.label_ids):
            raise ValueError("label ids must be unique within a prompt set")
        if not np.all(np.isfinite(emb)):
            raise ValueError("prompt embeddings contain non-finite components")
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return len(self.label_ids)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


def zero_shot_predict(
    img: np.ndarray,
    prompts: PromptSet,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[int, np.ndarray]:
    """Score an image embedding against every prompt in the set.

    Both sides are L2-normalized, so scores are cosine similarities; the
    posterior is softmax(temperature * cosine). Returns the argmax label id
    and the posterior over `prompts.label_ids` order.
    """
    if len(prompts) == 0:
        raise ValueError("prompt set is empty")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    img = np.asarray(img, dtype=np.float32)
    if img.shape[-1] != prompts.dim:
        raise DimensionMismatchError(
            f"image dim {img.shape[-1]} does not match prompt dim {prompts.dim}"
        )
    img64 = img.astype(np.float64)
    p64 = prompts.embeddings.astype(np.float64)
    img_norm = np.linalg.norm(img64)
    if img_norm > 0:
        img64 = img64 / img_norm
    p_norms = np.linalg.norm(p64, axis=1)
    p64 = np.divide(p64, p_norms[:, None], out=np.zeros_like(p64), where=p_norms[:, None] > 0)
    logits = temperature * (p64 @ img64)
    logits -= logits.max()
    exp = np.exp(logits)
    posterior = exp / exp.sum()
    best = int(np.argmax(posterior))
    return prompts.label_ids[best], posterior
