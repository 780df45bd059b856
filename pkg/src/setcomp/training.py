"""Episodic samplers, model bundles, and the three joint training loops.

Each step draws its own numpy Generator from (seed, step), so training is
reproducible step-by-step and resuming from a checkpoint replays exactly
the same data schedule.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .compose import fold_table_tensor
from .labelsets import Episode, LabelSet, enumerate_label_sets
from .losses import bce_query_loss, triplet_margin_loss, weighted_multilabel_bce
from .nets import (
    EncoderConfig,
    GHead,
    HHead,
    LabelEmbedder,
    Model3Config,
    Model3Head,
    build_encoder,
    init_params,
    to_batch_tensor,
)
from .render import GRID_SCENE, GlyphStore, RenderSpec, render_composite, render_scene, render_singleton, resize_image


@dataclass
class TrainConfig:
    margin: float = 0.1
    cap: int = 3
    k: int = 5
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    size_weights: tuple[float, ...] | None = None  # over |T| in 1..cap; None = uniform

    def __post_init__(self):
        if self.margin <= 0.0:
            raise ValueError("margin must be positive")
        if not 1 <= self.cap <= self.k:
            raise ValueError("cap must be in 1..k")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.size_weights is not None and len(self.size_weights) != self.cap:
            raise ValueError("size_weights must have one weight per size 1..cap")


_POOLS: dict[tuple[int, int], list[LabelSet]] = {}


def _candidate_pool(k: int, cap: int) -> list[LabelSet]:
    key = (k, cap)
    if key not in _POOLS:
        _POOLS[key] = enumerate_label_sets(k, cap)
    return _POOLS[key]


def sample_negative(k: int, cap: int, t: LabelSet, rng: np.random.Generator) -> LabelSet:
    """Uniform draw over nonempty sets of size <= cap, excluding ``t``."""
    pool = _candidate_pool(k, cap)
    n_candidates = len(pool) - (1 if any(s.mask == t.mask for s in pool) else 0)
    if n_candidates < 1:
        raise RuntimeError(f"negative pool is empty for k={k}, cap={cap}")
    while True:
        cand = pool[int(rng.integers(len(pool)))]
        if cand.mask != t.mask:
            return cand


def _draw_sizes(cap: int, weights: tuple[float, ...] | None, rng: np.random.Generator, n: int) -> np.ndarray:
    if weights is None:
        return rng.integers(1, cap + 1, size=n)
    w = np.asarray(weights, dtype=np.float64)
    if w.min() < 0 or w.sum() <= 0:
        raise ValueError("size_weights must be nonnegative and not all zero")
    return rng.choice(np.arange(1, cap + 1), size=n, p=w / w.sum())


def _draw_episode(store: GlyphStore, catalog_ids, k: int, rng: np.random.Generator) -> Episode:
    ids = np.asarray(sorted(catalog_ids))
    if len(ids) < k:
        raise ValueError(f"catalog has {len(ids)} classes, episode needs {k}")
    class_ids = tuple(int(c) for c in rng.choice(ids, size=k, replace=False))
    exemplar_ids = tuple(int(rng.integers(store.n_exemplars(c))) for c in class_ids)
    return Episode(class_ids, exemplar_ids)


def sample_episode(
    store: GlyphStore,
    catalog_ids,
    config: TrainConfig,
    spec: RenderSpec,
    rng: np.random.Generator,
):
    """Draw one episode: k distinct classes, one reference render per class,
    and a batch of composite scenes with sizes from the size distribution."""
    episode = _draw_episode(store, catalog_ids, config.k, rng)
    refs = [
        render_singleton(store, cid, spec, rng, universe_size=config.k, bit=i, exemplar_id=ex)
        for i, (cid, ex) in enumerate(zip(episode.class_ids, episode.reference_exemplar_ids))
    ]
    sizes = _draw_sizes(config.cap, config.size_weights, rng, config.batch_size)
    composites = []
    for s in sizes:
        idxs = rng.choice(config.k, size=int(s), replace=False)
        t = LabelSet.from_indices((int(i) for i in idxs), config.k)
        composites.append(render_composite(store, episode, t, spec, rng))
    return episode, refs, composites


def sample_query_pairs(
    store: GlyphStore,
    catalog_ids,
    config: TrainConfig,
    scene_spec: RenderSpec,
    ref_spec: RenderSpec,
    rng: np.random.Generator,
):
    """Containment-query batch: composite x_a (sizes from the size
    distribution, uniform 1..cap by default), singleton x_b, first half
    positive (x_b's class inside x_a's set) and second half negative.
    Negatives prefer episode classes outside x_a's set and fall back to
    out-of-episode catalog classes when x_a covers the whole episode.
    """
    episode = _draw_episode(store, catalog_ids, config.k, rng)
    n = config.batch_size
    sizes = _draw_sizes(config.cap, config.size_weights, rng, n)
    scenes_a, scenes_b, labels, query_ids = [], [], [], []
    render_a = render_scene if scene_spec.mode == GRID_SCENE else render_composite
    outside_catalog = [c for c in sorted(catalog_ids) if c not in episode.class_ids]
    for j in range(n):
        idxs = [int(i) for i in rng.choice(config.k, size=int(sizes[j]), replace=False)]
        t_a = LabelSet.from_indices(idxs, config.k)
        scenes_a.append(render_a(store, episode, t_a, scene_spec, rng))
        positive = j < n - n // 2
        if positive:
            cid = episode.class_ids[idxs[int(rng.integers(len(idxs)))]]
        else:
            inside = set(idxs)
            outside = [i for i in range(config.k) if i not in inside]
            if outside:
                cid = episode.class_ids[outside[int(rng.integers(len(outside)))]]
            elif outside_catalog:
                cid = int(outside_catalog[int(rng.integers(len(outside_catalog)))])
            else:
                raise ValueError("no class available for a negative query")
        scenes_b.append(render_singleton(store, cid, ref_spec, rng))
        labels.append(1.0 if positive else 0.0)
        query_ids.append(cid)
    return episode, scenes_a, scenes_b, np.asarray(labels, dtype=np.float32), query_ids


# ---------------------------------------------------------------------------
# model bundles and checkpoint plumbing


def _torch_to_numpy_dtype(dtype: torch.dtype):
    return {torch.float32: np.float32, torch.float64: np.float64, torch.int64: np.int64}[dtype]


def state_arrays(modules: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for mname, module in modules.items():
        for key, tensor in module.state_dict().items():
            out[f"{mname}/{key}"] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_state_arrays(modules: dict[str, nn.Module], arrays: dict[str, np.ndarray]) -> None:
    for mname, module in modules.items():
        new_state = {}
        for key, tensor in module.state_dict().items():
            name = f"{mname}/{key}"
            if name not in arrays:
                raise ValueError(f"checkpoint is missing array {name!r}")
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(f"array {name!r} has shape {arr.shape}, model expects {tuple(tensor.shape)}")
            new_state[key] = torch.from_numpy(arr.astype(_torch_to_numpy_dtype(tensor.dtype)))
        module.load_state_dict(new_state)


def _optimizer_arrays(opt: torch.optim.Optimizer, n_params: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, val in state.items():
            arr = val.detach().cpu().numpy() if isinstance(val, torch.Tensor) else np.asarray(float(val))
            out[f"opt/{idx:04d}/{key}"] = arr.astype("<f4")
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.asarray(arr, dtype=np.float32).copy())
    if state:
        sd["state"] = state
        opt.load_state_dict(sd)


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr)


def _spec_from_dict(d: dict) -> RenderSpec:
    d = dict(d)
    d["scale_range"] = tuple(d["scale_range"])
    return RenderSpec(**d)


def _encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return EncoderConfig(**d)


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if d.get("size_weights") is not None:
        d["size_weights"] = tuple(d["size_weights"])
    return TrainConfig(**d)


@dataclass
class UnionModel:
    """Encoder f plus union head g (Model I; TradEm is the g='mean', cap=1 case)."""

    encoder: nn.Module
    g_head: GHead
    encoder_config: EncoderConfig
    g_variant: str

    def modules(self) -> dict[str, nn.Module]:
        return {"f": self.encoder, "g": self.g_head}

    def eval(self):
        self.encoder.eval()
        self.g_head.eval()
        return self

    @classmethod
    def build(cls, encoder_config: EncoderConfig, g_variant: str, seed: int) -> "UnionModel":
        encoder = build_encoder(encoder_config)
        g_head = GHead(g_variant, encoder_config.m)
        init_params(encoder, seed)
        init_params(g_head, seed + 1)
        return cls(encoder, g_head, encoder_config, g_variant)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "UnionModel":
        cfg = ckpt.configs
        model = cls.build(_encoder_config_from_dict(cfg["encoder"]), cfg["g_variant"], ckpt.seed)
        load_state_arrays(model.modules(), ckpt.arrays)
        return model


@dataclass
class QueryModel:
    """Encoder f plus containment head h (Model II)."""

    encoder: nn.Module
    h_head: HHead
    encoder_config: EncoderConfig
    h_variant: str

    def modules(self) -> dict[str, nn.Module]:
        return {"f": self.encoder, "h": self.h_head}

    def eval(self):
        self.encoder.eval()
        self.h_head.eval()
        return self

    @classmethod
    def build(cls, encoder_config: EncoderConfig, h_variant: str, seed: int) -> "QueryModel":
        encoder = build_encoder(encoder_config)
        h_head = HHead(h_variant, encoder_config.m)
        init_params(encoder, seed)
        init_params(h_head, seed + 1)
        return cls(encoder, h_head, encoder_config, h_variant)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "QueryModel":
        cfg = ckpt.configs
        model = cls.build(_encoder_config_from_dict(cfg["encoder"]), cfg["h_variant"], ckpt.seed)
        load_state_arrays(model.modules(), ckpt.arrays)
        return model


@dataclass
class SupervisedModel:
    """Model III: image feature net, label embedder, and query head, trained jointly."""

    image_net: nn.Module
    label_embedder: LabelEmbedder
    head: Model3Head
    encoder_config: EncoderConfig
    config: Model3Config

    def modules(self) -> dict[str, nn.Module]:
        return {"f_im": self.image_net, "f_label": self.label_embedder, "head": self.head}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    @classmethod
    def build(cls, encoder_config: EncoderConfig, config: Model3Config, seed: int) -> "SupervisedModel":
        if encoder_config.m != config.image_dim or encoder_config.normalize:
            raise ValueError("image net must output an unnormalized feature of dim image_dim")
        image_net = build_encoder(encoder_config)
        label_embedder = LabelEmbedder(config.n_classes, config.label_dim)
        head = Model3Head(config)
        init_params(image_net, seed)
        init_params(label_embedder, seed + 1)
        init_params(head, seed + 2)
        return cls(image_net, label_embedder, head, encoder_config, config)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SupervisedModel":
        cfg = ckpt.configs
        model = cls.build(_encoder_config_from_dict(cfg["encoder"]), Model3Config(**cfg["model3"]), ckpt.seed)
        load_state_arrays(model.modules(), ckpt.arrays)
        return model

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode per-class probabilities, (N, n_classes)."""
        self.eval()
        outs = []
        with torch.no_grad():
            for lo in range(0, len(images), batch_size):
                x = to_batch_tensor(images[lo:lo + batch_size], self.encoder_config.input_size)
                feats = self.image_net(x)
                b = feats.shape[0]
                c = self.config.n_classes
                img = feats.unsqueeze(1).expand(b, c, self.config.image_dim).reshape(b * c, -1)
                lab = self.label_embedder.weight.unsqueeze(0).expand(b, c, self.config.label_dim).reshape(b * c, -1)
                outs.append(self.head(img, lab).reshape(b, c).numpy())
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# training loops


def _check_finite(loss: torch.Tensor, step: int) -> float:
    val = float(loss.detach())
    if not math.isfinite(val):
        raise RuntimeError(f"training diverged at step {step}: loss={val}")
    return val


def _run_loop(modules, param_list, config, step_fn, resume, configs):
    for m in modules.values():
        m.train()
    opt = make_optimizer(param_list, config)
    start = 0
    if resume is not None:
        if resume.step > config.steps:
            raise ValueError(f"checkpoint is at step {resume.step}, beyond configured {config.steps}")
        _restore_optimizer(opt, resume.arrays)
        start = resume.step
    trace = []
    for step in range(start, config.steps):
        rng = np.random.default_rng([config.seed, step])
        opt.zero_grad()
        loss = step_fn(step, rng)
        loss.backward()
        opt.step()
        trace.append({"step": step + 1, "loss": _check_finite(loss, step)})
    for m in modules.values():
        m.eval()
    arrays = state_arrays(modules)
    arrays.update(_optimizer_arrays(opt, len(param_list)))
    ckpt = Checkpoint(arrays=arrays, configs=configs, step=config.steps, seed=config.seed)
    return ckpt, trace


def train_model1(
    store: GlyphStore,
    catalog_ids,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    g_variant: str = "lin",
    spec: RenderSpec | None = None,
    resume: Checkpoint | None = None,
):
    """Jointly train f and g with the subset-recurrence triplet objective.

    Each step: sample an episode, embed its reference singletons, fold g
    into the full subset table, and hinge the distance from each composite
    embedding to its true entry against one random negative entry.
    """
    encoder_config = encoder_config or EncoderConfig()
    spec = spec or RenderSpec()
    if resume is not None:
        model = UnionModel.from_checkpoint(resume)
        encoder_config, g_variant = model.encoder_config, model.g_variant
    else:
        model = UnionModel.build(encoder_config, g_variant, config.seed)
    configs = {
        "model": "union",
        "g_variant": g_variant,
        "encoder": asdict(encoder_config),
        "train": asdict(config),
        "render": asdict(spec),
    }
    params = [p for m in model.modules().values() for p in m.parameters()]

    def step_fn(step: int, rng: np.random.Generator) -> torch.Tensor:
        _, refs, composites = sample_episode(store, catalog_ids, config, spec, rng)
        images = np.stack([s.image for s in refs] + [s.image for s in composites])
        emb = model.encoder(to_batch_tensor(images, encoder_config.input_size))
        ref_emb, comp_emb = emb[: config.k], emb[config.k:]
        sets, table = fold_table_tensor(ref_emb, model.g_head, config.cap)
        index = {s.mask: i for i, s in enumerate(sets)}
        pos_idx = [index[s.truth.mask] for s in composites]
        neg_idx = [index[sample_negative(config.k, config.cap, s.truth, rng).mask] for s in composites]
        return triplet_margin_loss(comp_emb, table[pos_idx], table[neg_idx], config.margin)

    ckpt, trace = _run_loop(model.modules(), params, config, step_fn, resume, configs)
    return model, ckpt, trace


def train_model2(
    store: GlyphStore,
    catalog_ids,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    h_variant: str = "dnn",
    scene_spec: RenderSpec | None = None,
    ref_spec: RenderSpec | None = None,
    resume: Checkpoint | None = None,
):
    """Jointly train f and h on balanced containment queries with BCE."""
    encoder_config = encoder_config or EncoderConfig()
    scene_spec = scene_spec or RenderSpec()
    ref_spec = ref_spec or scene_spec
    if resume is not None:
        model = QueryModel.from_checkpoint(resume)
        encoder_config, h_variant = model.encoder_config, model.h_variant
    else:
        model = QueryModel.build(encoder_config, h_variant, config.seed)
    configs = {
        "model": "query",
        "h_variant": h_variant,
        "encoder": asdict(encoder_config),
        "train": asdict(config),
        "render": asdict(scene_spec),
        "render_ref": asdict(ref_spec),
    }
    params = [p for m in model.modules().values() for p in m.parameters()]
    size = encoder_config.input_size

    def step_fn(step: int, rng: np.random.Generator) -> torch.Tensor:
        _, scenes_a, scenes_b, labels, _ = sample_query_pairs(store, catalog_ids, config, scene_spec, ref_spec, rng)
        imgs_a = np.stack([s.image if s.image.shape == (size, size) else resize_image(s.image, size) for s in scenes_a])
        imgs_b = np.stack([s.image if s.image.shape == (size, size) else resize_image(s.image, size) for s in scenes_b])
        emb = model.encoder(to_batch_tensor(np.concatenate([imgs_a, imgs_b]), size))
        n = len(scenes_a)
        probs = model.h_head(emb[:n], emb[n:])
        return bce_query_loss(probs, torch.from_numpy(labels))

    ckpt, trace = _run_loop(model.modules(), params, config, step_fn, resume, configs)
    return model, ckpt, trace


@dataclass
class SupervisedScenes:
    """Fixed multi-label dataset: encoder-sized images with multi-hot labels."""

    images: np.ndarray  # (N, S, S) float32
    labels: np.ndarray  # (N, n_classes) float32
    class_ids: tuple[int, ...]


def make_supervised_scenes(
    store: GlyphStore,
    class_ids,
    n_images: int,
    spec: RenderSpec,
    rng: np.random.Generator,
    min_classes: int = 1,
    max_classes: int = 4,
    input_size: int = 64,
) -> SupervisedScenes:
    """Render a supervised multi-label scene set over a fixed class inventory."""
    class_ids = tuple(sorted(int(c) for c in class_ids))
    images, labels = [], []
    for _ in range(n_images):
        s = int(rng.integers(min_classes, max_classes + 1))
        chosen = sorted(int(c) for c in rng.choice(class_ids, size=s, replace=False))
        exemplars = tuple(int(rng.integers(store.n_exemplars(c))) for c in chosen)
        episode = Episode(tuple(chosen), exemplars)
        t = LabelSet((1 << s) - 1, s)
        scene = render_scene(store, episode, t, spec, rng) if spec.mode == GRID_SCENE else render_composite(store, episode, t, spec, rng)
        img = scene.image if scene.image.shape == (input_size, input_size) else resize_image(scene.image, input_size)
        images.append(img.astype(np.float32))
        row = np.zeros(len(class_ids), dtype=np.float32)
        for c in chosen:
            row[class_ids.index(c)] = 1.0
        labels.append(row)
    return SupervisedScenes(np.stack(images), np.stack(labels), class_ids)


def train_model3(
    dataset: SupervisedScenes,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    model3_config: Model3Config | None = None,
    resume: Checkpoint | None = None,
):
    """Jointly train f_im, f_label, and the query head with class-balanced BCE
    aggregated over every class of every image."""
    n_classes = dataset.labels.shape[1]
    model3_config = model3_config or Model3Config(n_classes=n_classes)
    encoder_config = encoder_config or EncoderConfig(m=model3_config.image_dim, normalize=False)
    if model3_config.n_classes != n_classes:
        raise ValueError("model3 n_classes must match the dataset")
    if resume is not None:
        model = SupervisedModel.from_checkpoint(resume)
    else:
        model = SupervisedModel.build(encoder_config, model3_config, config.seed)
    configs = {
        "model": "supervised",
        "encoder": asdict(model.encoder_config),
        "model3": asdict(model.config),
        "train": asdict(config),
    }
    params = [p for m in model.modules().values() for p in m.parameters()]
    c = model.config.n_classes

    def step_fn(step: int, rng: np.random.Generator) -> torch.Tensor:
        idx = rng.integers(len(dataset.images), size=config.batch_size)
        x = to_batch_tensor(dataset.images[idx], model.encoder_config.input_size)
        y = torch.from_numpy(dataset.labels[idx])
        feats = model.image_net(x)
        b = feats.shape[0]
        img = feats.unsqueeze(1).expand(b, c, model.config.image_dim).reshape(b * c, -1)
        lab = model.label_embedder.weight.unsqueeze(0).expand(b, c, model.config.label_dim).reshape(b * c, -1)
        probs = model.head(img, lab).reshape(b, c)
        return weighted_multilabel_bce(probs, y)

    ckpt, trace = _run_loop(model.modules(), params, config, step_fn, resume, configs)
    return model, ckpt, trace
