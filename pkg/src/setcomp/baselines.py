"""Comparison systems: TradEm (singleton-trained non-compositional embedding),
MF (constant most-frequent guess), SlideWin (contiguous-subgrid window scan),
and the independent-sigmoid multi-label CNN.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .compose import SubsetTable, decode_nearest_subset
from .labelsets import LabelSet, canonical_elements, enumerate_label_sets
from .losses import triplet_margin_loss, weighted_multilabel_bce
from .metrics import calibrate_threshold
from .nets import (
    EncoderConfig,
    LabelEmbedder,
    Model3Config,
    Model3Head,
    MultilabelMLP,
    build_encoder,
    count_params,
    encode,
    init_params,
    to_batch_tensor,
)
from .render import GlyphStore, RenderSpec, render_composite, render_singleton, resize_image
from .training import (
    SupervisedScenes,
    TrainConfig,
    UnionModel,
    _draw_episode,
    _draw_sizes,
    _encoder_config_from_dict,
    _run_loop,
    load_state_arrays,
    sample_episode,
    state_arrays,
    train_model1,
)

TRADEM_UNION = "union"
TRADEM_CONTAINMENT = "containment"


def tradem_train(
    store: GlyphStore,
    catalog_ids,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    spec: RenderSpec | None = None,
    variant: str = TRADEM_UNION,
):
    """Train a traditional (non-compositional) embedding.

    union:        triplet training on singleton renders only (cap forced to 1);
                  composites are later embedded by averaging singleton embeddings.
    containment:  composite anchors; the positive is a singleton of the
                  anchor's first class under the fixed canonical ordering,
                  the negative a singleton of a class outside the anchor's set.
    """
    encoder_config = encoder_config or EncoderConfig()
    spec = spec or RenderSpec()
    if variant == TRADEM_UNION:
        cfg = TrainConfig(**{**asdict(config), "cap": 1, "size_weights": None})
        return train_model1(store, catalog_ids, cfg, encoder_config, g_variant="mean", spec=spec)
    if variant != TRADEM_CONTAINMENT:
        raise ValueError(f"unknown TradEm variant {variant!r}")

    model = UnionModel.build(encoder_config, "mean", config.seed)
    configs = {
        "model": "union",
        "g_variant": "mean",
        "tradem_variant": variant,
        "encoder": asdict(encoder_config),
        "train": asdict(config),
        "render": asdict(spec),
    }
    params = list(model.encoder.parameters())
    size = encoder_config.input_size
    sorted_catalog = sorted(int(c) for c in catalog_ids)

    def step_fn(step: int, rng: np.random.Generator) -> torch.Tensor:
        episode = _draw_episode(store, sorted_catalog, config.k, rng)
        sizes = _draw_sizes(config.cap, config.size_weights, rng, config.batch_size)
        anchors, positives, negatives = [], [], []
        outside_catalog = [c for c in sorted_catalog if c not in episode.class_ids]
        for s in sizes:
            idxs = sorted(int(i) for i in rng.choice(config.k, size=int(s), replace=False))
            t = LabelSet.from_indices(idxs, config.k)
            anchors.append(render_composite(store, episode, t, spec, rng).image)
            # fixed ordering picks the anchor's canonically-first class
            pos_cid = episode.class_ids[idxs[0]]
            positives.append(render_singleton(store, pos_cid, spec, rng).image)
            outside = [i for i in range(config.k) if i not in idxs]
            if outside:
                neg_cid = episode.class_ids[outside[int(rng.integers(len(outside)))]]
            else:
                neg_cid = outside_catalog[int(rng.integers(len(outside_catalog)))]
            negatives.append(render_singleton(store, neg_cid, spec, rng).image)
        images = np.stack(anchors + positives + negatives)
        emb = model.encoder(to_batch_tensor(images, size))
        n = len(anchors)
        return triplet_margin_loss(emb[:n], emb[n:2 * n], emb[2 * n:], config.margin)

    ckpt, trace = _run_loop({"f": model.encoder, "g": model.g_head}, params, config, step_fn, None, configs)
    return model, ckpt, trace


def tradem_table(reference_embeddings, cap: int) -> SubsetTable:
    """Composite entries as the normalized mean of their singleton embeddings."""
    refs = [np.asarray(v, dtype=np.float64) for v in reference_embeddings]
    k = len(refs)
    entries = {}
    for s in enumerate_label_sets(k, cap):
        mean = np.mean([refs[i] for i in canonical_elements(s)], axis=0)
        entries[s] = mean / max(np.linalg.norm(mean), 1e-12)
    # singletons stay exactly the encoder outputs
    for i in range(k):
        entries[LabelSet(1 << i, k)] = refs[i]
    return SubsetTable.from_entries(entries, k, cap)


def tradem_predict_set(encoder, reference_images, query_image, cap: int, topk: int = 1):
    """Decode a query against the averaged-singleton subset table."""
    refs = encode(encoder, np.stack([np.asarray(r, np.float32) for r in reference_images]))
    table = tradem_table(list(refs), cap)
    return decode_nearest_subset(encode(encoder, query_image), table, topk)


def tradem_query(encoder, image_a, image_b, threshold: float = 0.5) -> tuple[bool, float]:
    """Containment by embedding distance: contains iff ||f(a) - f(b)|| < threshold (strict)."""
    emb = encode(encoder, np.stack([np.asarray(image_a, np.float32), np.asarray(image_b, np.float32)]))
    dist = float(np.linalg.norm(emb[0] - emb[1]))
    return dist < threshold, dist


def mf_predict(candidates: list[LabelSet], topk: int = 3) -> list[LabelSet]:
    """Constant guess: the canonically-first candidates, regardless of input."""
    if not candidates:
        raise ValueError("need at least one candidate label set")
    ranked = sorted(candidates, key=lambda s: (len(s), s.mask))
    return ranked[: min(topk, len(ranked))]


def slidewin_grid(height: int, width: int, max_grid: int = 4) -> tuple[int, int]:
    """Cell grid from the image aspect ratio; the longer side gets max_grid cells."""
    if height >= width:
        return max_grid, max(1, round(max_grid * width / height))
    return max(1, round(max_grid * height / width)), max_grid


def slidewin_windows(
    image: np.ndarray,
    max_grid: int = 4,
    out_size: int = 64,
    grid: tuple[int, int] | None = None,
) -> list[np.ndarray]:
    """Every contiguous axis-aligned subrectangle of the cell grid, resized.

    A rows x cols grid yields T(rows)*T(cols) windows, T(n) = n(n+1)/2.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    rows, cols = grid if grid is not None else slidewin_grid(h, w, max_grid)
    r_edges = [round(i * h / rows) for i in range(rows + 1)]
    c_edges = [round(j * w / cols) for j in range(cols + 1)]
    windows = []
    for r0 in range(rows):
        for r1 in range(r0, rows):
            for c0 in range(cols):
                for c1 in range(c0, cols):
                    patch = image[r_edges[r0]:r_edges[r1 + 1], c_edges[c0]:c_edges[c1 + 1]]
                    if patch.shape == (out_size, out_size):
                        windows.append(patch)
                    else:
                        windows.append(resize_image(patch, out_size))
    return windows


def slidewin_score(encoder, scene_image: np.ndarray, reference_image: np.ndarray, max_grid: int = 4) -> float:
    """Minimum embedding distance between any window and the queried reference."""
    size = encoder.config.input_size
    windows = slidewin_windows(scene_image, max_grid=max_grid, out_size=size)
    win_emb = encode(encoder, np.stack(windows))
    ref_emb = encode(encoder, np.asarray(reference_image, np.float32))
    return float(np.min(np.linalg.norm(win_emb - ref_emb[None, :], axis=1)))


def slidewin_query(
    encoder,
    scene_image: np.ndarray,
    reference_image: np.ndarray,
    threshold: float,
    max_grid: int = 4,
) -> tuple[bool, float]:
    """Containment decision: minimum window distance below the calibrated threshold."""
    score = slidewin_score(encoder, scene_image, reference_image, max_grid=max_grid)
    return score < threshold, score


def calibrate_distance_threshold(distances, labels) -> float:
    """Distance cutoff maximizing accuracy of (distance < threshold) on validation data."""
    return -calibrate_threshold(-np.asarray(distances, dtype=np.float64), labels)


def matched_hidden_width(model3_config: Model3Config, feature_dim: int) -> int:
    """Hidden width for the independent-sigmoid head whose parameter count best
    matches the supervised query head plus its label embedder."""
    target = count_params(Model3Head(model3_config)) + model3_config.n_classes * model3_config.label_dim
    c = model3_config.n_classes

    def total(w: int) -> int:
        return (feature_dim * w + w) + 2 * w + (w * w + w) + 2 * w + (w * c + c)

    widths = range(8, 1025)
    return min(widths, key=lambda w: abs(total(w) - target))


@dataclass
class MultilabelBaseline:
    """Backbone feature net plus independent per-class sigmoid head."""

    image_net: nn.Module
    head: MultilabelMLP
    encoder_config: EncoderConfig
    n_classes: int

    def modules(self) -> dict[str, nn.Module]:
        return {"f_im": self.image_net, "head": self.head}

    def eval(self):
        self.image_net.eval()
        self.head.eval()
        return self

    @classmethod
    def build(cls, encoder_config: EncoderConfig, n_classes: int, hidden: int, seed: int) -> "MultilabelBaseline":
        image_net = build_encoder(encoder_config)
        head = MultilabelMLP(encoder_config.m, n_classes, hidden=hidden)
        init_params(image_net, seed)
        init_params(head, seed + 1)
        return cls(image_net, head, encoder_config, n_classes)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MultilabelBaseline":
        cfg = ckpt.configs
        model = cls.build(
            _encoder_config_from_dict(cfg["encoder"]), cfg["n_classes"], cfg["hidden"], ckpt.seed
        )
        load_state_arrays(model.modules(), ckpt.arrays)
        return model

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode per-class probabilities, (N, n_classes)."""
        self.eval()
        outs = []
        with torch.no_grad():
            for lo in range(0, len(images), batch_size):
                x = to_batch_tensor(images[lo:lo + batch_size], self.encoder_config.input_size)
                outs.append(self.head(self.image_net(x)).numpy())
        return np.concatenate(outs, axis=0)


def train_multilabel_baseline(
    dataset: SupervisedScenes,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    hidden: int | None = None,
    model3_config: Model3Config | None = None,
):
    """Train the independent-sigmoid baseline with the same balanced BCE.

    ``hidden=None`` picks the width whose head parameter count best matches
    the supervised query head plus label embedder for this class count.
    """
    n_classes = dataset.labels.shape[1]
    model3_config = model3_config or Model3Config(n_classes=n_classes)
    encoder_config = encoder_config or EncoderConfig(m=model3_config.image_dim, normalize=False)
    if hidden is None:
        hidden = matched_hidden_width(model3_config, encoder_config.m)
    model = MultilabelBaseline.build(encoder_config, n_classes, hidden, config.seed)
    configs = {
        "model": "multilabel_baseline",
        "encoder": asdict(encoder_config),
        "n_classes": n_classes,
        "hidden": hidden,
        "train": asdict(config),
    }
    params = [p for m in model.modules().values() for p in m.parameters()]

    def step_fn(step: int, rng: np.random.Generator) -> torch.Tensor:
        idx = rng.integers(len(dataset.images), size=config.batch_size)
        x = to_batch_tensor(dataset.images[idx], encoder_config.input_size)
        y = torch.from_numpy(dataset.labels[idx])
        return weighted_multilabel_bce(model.head(model.image_net(x)), y)

    ckpt, trace = _run_loop(model.modules(), params, config, step_fn, None, configs)
    return model, ckpt, trace
