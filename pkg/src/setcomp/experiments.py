"""Config-driven experiment protocols.

Four desk-scale experiments:
  exp1_union        one-shot label-set identification with the union head
  exp2_containment  one-shot containment queries on overlapping composites
  exp3_scene        containment on non-overlapping grid scenes vs SlideWin
  exp4_supervised   fixed-inventory supervised queries vs independent sigmoids

Each experiment has train / eval / report / render-preview stages that read
one flat key=value config file and write artifacts stamped with the config
hash and seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .baselines import (
    MultilabelBaseline,
    calibrate_distance_threshold,
    mf_predict,
    slidewin_score,
    tradem_table,
    tradem_train,
    train_multilabel_baseline,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .compose import SubsetTable, decode_nearest_subset, fold_table_tensor
from .labelsets import LabelSet, canonical_elements, enumerate_label_sets
from .metrics import auc_rank, binary_accuracy, labelset_report
from .nets import EncoderConfig, encode
from .render import (
    GRID_SCENE,
    OVERLAY_MIN,
    GlyphStore,
    RenderSpec,
    load_glyph_store,
    render_composite,
    render_scene,
    render_singleton,
    resize_image,
    save_png,
    synth_glyph_store,
)
from .training import (
    QueryModel,
    SupervisedModel,
    TrainConfig,
    UnionModel,
    _draw_episode,
    make_supervised_scenes,
    sample_query_pairs,
    train_model1,
    train_model2,
    train_model3,
)

EXPERIMENTS = ("exp1_union", "exp2_containment", "exp3_scene", "exp4_supervised")


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in _parse_str_list(text))


# key -> (parser, default); None default means experiment-dependent
CONFIG_SCHEMA: dict[str, tuple] = {
    "experiment": (str, None),
    "seed": (int, 0),
    "out_dir": (str, ""),
    "glyph_dir": (str, ""),
    "classes_train": (int, 200),
    "classes_test": (int, 50),
    "exemplars": (int, 20),
    "data_seed": (int, 1234),
    "k": (int, 5),
    "cap": (int, None),
    "steps": (int, None),
    "batch_size": (int, 32),
    "lr": (float, 1e-3),
    "margin": (float, 0.1),
    "optimizer": (str, "adam"),
    "embed_dim": (int, 32),
    "channels": (_parse_int_list, (16, 32, 32, 64)),
    "input_size": (int, 64),
    "backbone": (str, "small_cnn"),
    "variants": (_parse_str_list, None),
    "baselines": (_parse_bool, True),
    "shift_frac": (float, 0.1),
    "scale_lo": (float, 0.8),
    "scale_hi": (float, 1.2),
    "rot_deg": (float, 15.0),
    "noise_sigma": (float, 0.05),
    "grid_rows": (int, 2),
    "grid_cols": (int, 2),
    "max_grid": (int, 4),
    "eval_episodes": (int, None),
    "eval_batch": (int, 32),
    "calibration_pairs": (int, 240),
    "n_classes": (int, 20),
    "train_images": (int, 2500),
    "test_images": (int, 500),
}

_EXPERIMENT_DEFAULTS = {
    "exp1_union": {"cap": 3, "steps": 2500, "variants": ("lin",), "eval_episodes": 150},
    "exp2_containment": {"cap": 5, "steps": 2500, "variants": ("dnn",), "eval_episodes": 60},
    "exp3_scene": {"cap": 4, "steps": 2500, "variants": ("dnn",), "eval_episodes": 40},
    "exp4_supervised": {"cap": 4, "steps": 1500, "variants": ("model3",), "eval_episodes": 0},
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError as exc:
            raise AttributeError(name) from exc

    @property
    def hash(self) -> str:
        canonical = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in stripped.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        raw[key] = val
    if "experiment" not in raw:
        raise ConfigError("config must set 'experiment'")
    if raw["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {raw['experiment']!r}; expected one of {EXPERIMENTS}")

    values: dict = {}
    exp_defaults = _EXPERIMENT_DEFAULTS[raw["experiment"]]
    for key, (parser, default) in CONFIG_SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({exc})") from exc
        else:
            values[key] = exp_defaults.get(key, default)
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
    if not values["out_dir"]:
        values["out_dir"] = os.path.join("runs", values["experiment"])
    cfg = ExperimentConfig(values)
    _validate_config(cfg)
    return cfg


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text, overrides)


def _validate_config(cfg: ExperimentConfig) -> None:
    if cfg.glyph_dir and not os.path.isdir(cfg.glyph_dir):
        raise ConfigError(f"glyph_dir {cfg.glyph_dir!r} does not exist")
    if not cfg.variants:
        raise ConfigError("variant list must be nonempty")
    if cfg.experiment == "exp1_union":
        bad = set(cfg.variants) - {"mean", "lin", "linfc", "dnn"}
    elif cfg.experiment in ("exp2_containment", "exp3_scene"):
        bad = set(cfg.variants) - {"lin", "linfc", "dnn"}
    else:
        bad = set(cfg.variants) - {"model3"}
    if bad:
        raise ConfigError(f"invalid variants for {cfg.experiment}: {sorted(bad)}")
    if cfg.experiment == "exp3_scene" and cfg.grid_rows * cfg.grid_cols < cfg.cap:
        raise ConfigError("grid must have at least cap cells")
    if cfg.steps < 1 or cfg.k < 1:
        raise ConfigError("steps and k must be positive")


# ---------------------------------------------------------------------------
# data and model plumbing


def make_store(cfg: ExperimentConfig) -> tuple[GlyphStore, list[int], list[int]]:
    """Build or load the glyph catalog and split class ids into train/test."""
    if cfg.glyph_dir:
        store = load_glyph_store(cfg.glyph_dir)
    else:
        store = synth_glyph_store(cfg.classes_train + cfg.classes_test, cfg.exemplars, cfg.data_seed)
    ids = store.class_ids
    need = cfg.classes_train + cfg.classes_test
    if len(ids) < need:
        raise ConfigError(f"store has {len(ids)} classes, config needs {need}")
    return store, ids[: cfg.classes_train], ids[cfg.classes_train: need]


def overlay_spec(cfg: ExperimentConfig) -> RenderSpec:
    return RenderSpec(
        shift_frac=cfg.shift_frac,
        scale_range=(cfg.scale_lo, cfg.scale_hi),
        rot_deg=cfg.rot_deg,
        noise_sigma=cfg.noise_sigma,
        mode=OVERLAY_MIN,
    )


def grid_spec(cfg: ExperimentConfig) -> RenderSpec:
    return RenderSpec(
        shift_frac=cfg.shift_frac,
        scale_range=(cfg.scale_lo, cfg.scale_hi),
        rot_deg=cfg.rot_deg,
        noise_sigma=cfg.noise_sigma,
        mode=GRID_SCENE,
        grid_rows=cfg.grid_rows,
        grid_cols=cfg.grid_cols,
    )


def encoder_config(cfg: ExperimentConfig, m: int | None = None, normalize: bool = True) -> EncoderConfig:
    return EncoderConfig(
        m=m if m is not None else cfg.embed_dim,
        backbone=cfg.backbone,
        input_size=cfg.input_size,
        channels=tuple(cfg.channels),
        normalize=normalize,
    )


def train_config(cfg: ExperimentConfig, **over) -> TrainConfig:
    base = dict(
        margin=cfg.margin,
        cap=cfg.cap,
        k=cfg.k,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        optimizer=cfg.optimizer,
        seed=cfg.seed,
    )
    base.update(over)
    return TrainConfig(**base)


def _ckpt_path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, f"{name}.ckpt")


def _write_json(cfg: ExperimentConfig, name: str, payload: dict) -> str:
    payload = dict(payload)
    payload["config_sha256"] = cfg.hash
    payload["seed"] = cfg.seed
    path = os.path.join(cfg.out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _write_trace(cfg: ExperimentConfig, name: str, trace: list[dict]) -> str:
    path = os.path.join(cfg.out_dir, f"trace_{name}.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(json.dumps({**row, "system": name}, sort_keys=True))
            fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# training stage


def system_names(cfg: ExperimentConfig) -> list[str]:
    """Trained systems for the experiment (baselines included when enabled)."""
    exp = cfg.experiment
    if exp == "exp1_union":
        names = [f"g_{v}" for v in cfg.variants]
        if cfg.baselines:
            names.append("tradem")
        return names
    if exp == "exp2_containment":
        names = [f"h_{v}" for v in cfg.variants]
        if cfg.baselines:
            names.append("tradem")
        return names
    if exp == "exp3_scene":
        names = [f"h_{v}" for v in cfg.variants]
        if cfg.baselines:
            names.append("tradem")  # singleton-trained; shared by SlideWin
        return names
    names = ["model3"]
    if cfg.baselines:
        names.append("indep_sigmoid")
    return names


def run_train(cfg: ExperimentConfig) -> dict[str, str]:
    """Train every system of the experiment; write checkpoints and traces."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    store, train_ids, _ = make_store(cfg)
    artifacts: dict[str, str] = {}
    exp = cfg.experiment

    def finish(name: str, ckpt: Checkpoint, trace: list[dict]) -> None:
        path = _ckpt_path(cfg, name)
        save_checkpoint(path, ckpt)
        artifacts[name] = path
        artifacts[f"trace_{name}"] = _write_trace(cfg, name, trace)

    if exp == "exp1_union":
        spec = overlay_spec(cfg)
        for variant in cfg.variants:
            _, ckpt, trace = train_model1(store, train_ids, train_config(cfg), encoder_config(cfg), variant, spec)
            finish(f"g_{variant}", ckpt, trace)
        if cfg.baselines:
            _, ckpt, trace = tradem_train(store, train_ids, train_config(cfg), encoder_config(cfg), spec)
            finish("tradem", ckpt, trace)
    elif exp == "exp2_containment":
        spec = overlay_spec(cfg)
        for variant in cfg.variants:
            _, ckpt, trace = train_model2(store, train_ids, train_config(cfg), encoder_config(cfg), variant, spec, spec)
            finish(f"h_{variant}", ckpt, trace)
        if cfg.baselines:
            from .baselines import TRADEM_CONTAINMENT

            _, ckpt, trace = tradem_train(store, train_ids, train_config(cfg), encoder_config(cfg), spec, variant=TRADEM_CONTAINMENT)
            finish("tradem", ckpt, trace)
    elif exp == "exp3_scene":
        scene = grid_spec(cfg)
        refs = overlay_spec(cfg)
        for variant in cfg.variants:
            _, ckpt, trace = train_model2(store, train_ids, train_config(cfg), encoder_config(cfg), variant, scene, refs)
            finish(f"h_{variant}", ckpt, trace)
        if cfg.baselines:
            _, ckpt, trace = tradem_train(store, train_ids, train_config(cfg), encoder_config(cfg), refs)
            finish("tradem", ckpt, trace)
    else:
        scenes = make_supervised_dataset(cfg, store, split="train")
        _, ckpt, trace = train_model3(scenes, train_config(cfg, batch_size=min(cfg.batch_size, 16)),
                                      encoder_config(cfg, m=128, normalize=False))
        finish("model3", ckpt, trace)
        if cfg.baselines:
            _, ckpt, trace = train_multilabel_baseline(
                scenes, train_config(cfg, batch_size=min(cfg.batch_size, 16)),
                encoder_config(cfg, m=128, normalize=False))
            finish("indep_sigmoid", ckpt, trace)

    _write_manifest(cfg, artifacts, stage="train")
    return artifacts


def make_supervised_dataset(cfg: ExperimentConfig, store: GlyphStore, split: str):
    """Fixed-inventory multi-label scenes; train/test share classes but not renders."""
    class_ids = store.class_ids[: cfg.n_classes]
    n = cfg.train_images if split == "train" else cfg.test_images
    rng = np.random.default_rng([cfg.data_seed, 7 if split == "train" else 8, cfg.seed])
    return make_supervised_scenes(
        store, class_ids, n, grid_spec(cfg), rng,
        min_classes=1, max_classes=min(cfg.cap, cfg.grid_rows * cfg.grid_cols),
        input_size=cfg.input_size,
    )


def _write_manifest(cfg: ExperimentConfig, artifacts: dict[str, str], stage: str) -> None:
    path = os.path.join(cfg.out_dir, f"manifest_{stage}.json")
    payload = {
        "experiment": cfg.experiment,
        "stage": stage,
        "config_sha256": cfg.hash,
        "seed": cfg.seed,
        "artifacts": {k: os.path.basename(v) for k, v in sorted(artifacts.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# evaluation protocols


def eval_union_system(model: UnionModel, store, test_ids, *, k, cap, spec, seed,
                      n_episodes, tradem: bool = False, candidates=None) -> dict:
    """Label-set identification over shared episodic renders.

    Every episode renders one composite per candidate set (uniform over the
    lattice); predictions are top-3 decodes against the model's table.
    """
    candidates = candidates or enumerate_label_sets(k, cap)
    predictions, truths = [], []
    model.eval()
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, 101, ep])
        episode = _draw_episode(store, test_ids, k, rng)
        ref_imgs = []
        for i, (cid, ex) in enumerate(zip(episode.class_ids, episode.reference_exemplar_ids)):
            ref_imgs.append(render_singleton(store, cid, spec, rng, universe_size=k, bit=i, exemplar_id=ex).image)
        queries = [render_composite(store, episode, t, spec, rng) for t in candidates]
        refs = encode(model.encoder, np.stack(ref_imgs))
        if tradem:
            table = tradem_table(list(refs), cap)
        else:
            with torch.no_grad():
                _, tensor = fold_table_tensor(torch.from_numpy(refs.astype(np.float32)), model.g_head, cap)
            table = SubsetTable(candidates, tensor.numpy().astype(np.float64), k, cap)
        q_emb = encode(model.encoder, np.stack([q.image for q in queries]))
        for q_vec, scene in zip(q_emb, queries):
            ranked = decode_nearest_subset(q_vec, table, topk=3)
            predictions.append([r[0] for r in ranked])
            truths.append(scene.truth)
    report = labelset_report(predictions, truths)
    return report


def eval_mf(k: int, cap: int, seed: int, n_episodes: int) -> dict:
    """Most-frequent baseline under the same uniform candidate protocol."""
    candidates = enumerate_label_sets(k, cap)
    guess = mf_predict(candidates, topk=3)
    predictions, truths = [], []
    for ep in range(n_episodes):
        for t in candidates:
            predictions.append(guess)
            truths.append(t)
    return labelset_report(predictions, truths)


class QueryScorer:
    """Model II scorer: h(f(a), f(b)) batched, scene images resized to the encoder."""

    def __init__(self, model: QueryModel):
        self.model = model.eval()
        self.size = model.encoder_config.input_size

    def __call__(self, images_a, images_b) -> np.ndarray:
        a = np.stack([im if im.shape == (self.size, self.size) else resize_image(im, self.size) for im in images_a])
        b = np.stack([im if im.shape == (self.size, self.size) else resize_image(im, self.size) for im in images_b])
        emb_a = encode(self.model.encoder, a)
        emb_b = encode(self.model.encoder, b)
        with torch.no_grad():
            return self.model.h_head(torch.from_numpy(emb_a), torch.from_numpy(emb_b)).numpy()


class TradEmScorer:
    """Distance scorer: higher score = closer embeddings = 'contains'."""

    def __init__(self, model: UnionModel):
        self.model = model.eval()
        self.size = model.encoder_config.input_size

    def distances(self, images_a, images_b) -> np.ndarray:
        a = np.stack([im if im.shape == (self.size, self.size) else resize_image(im, self.size) for im in images_a])
        b = np.stack([im if im.shape == (self.size, self.size) else resize_image(im, self.size) for im in images_b])
        emb_a = encode(self.model.encoder, a)
        emb_b = encode(self.model.encoder, b)
        return np.linalg.norm(emb_a - emb_b, axis=1)

    def __call__(self, images_a, images_b) -> np.ndarray:
        return -self.distances(images_a, images_b)


class SlideWinScorer:
    """Min-over-windows distance scorer on the full-resolution scene."""

    def __init__(self, model: UnionModel, max_grid: int = 4):
        self.model = model.eval()
        self.max_grid = max_grid

    def distances(self, images_a, images_b) -> np.ndarray:
        return np.array([
            slidewin_score(self.model.encoder, a, b, max_grid=self.max_grid)
            for a, b in zip(images_a, images_b)
        ])

    def __call__(self, images_a, images_b) -> np.ndarray:
        return -self.distances(images_a, images_b)


def containment_pairs(store, class_ids, tcfg: TrainConfig, scene_spec, ref_spec, seed: int,
                      n_episodes: int, tag: int = 202):
    """Yield (images_a, images_b, labels) batches from the balanced pair sampler."""
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, tag, ep])
        _, scenes_a, scenes_b, labels, _ = sample_query_pairs(store, class_ids, tcfg, scene_spec, ref_spec, rng)
        yield [s.image for s in scenes_a], [s.image for s in scenes_b], labels


def eval_containment(systems: dict, store, class_ids, tcfg: TrainConfig, scene_spec, ref_spec,
                     seed: int, n_episodes: int, tag: int = 202) -> dict[str, dict]:
    """Score every system on identical query pairs; returns scores and labels."""
    all_scores: dict[str, list] = {name: [] for name in systems}
    all_labels: list = []
    for images_a, images_b, labels in containment_pairs(store, class_ids, tcfg, scene_spec, ref_spec, seed, n_episodes, tag):
        all_labels.append(labels)
        for name, scorer in systems.items():
            all_scores[name].append(np.asarray(scorer(images_a, images_b), dtype=np.float64))
    labels = np.concatenate(all_labels)
    return {name: {"scores": np.concatenate(chunks), "labels": labels} for name, chunks in all_scores.items()}


def supervised_queries(dataset, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per test image: one positive query per present class plus as many
    sampled absent classes, so half of all queried labels are positive."""
    rng = np.random.default_rng([seed, 303])
    img_idx, cls_idx, labels = [], [], []
    n_classes = dataset.labels.shape[1]
    for i in range(len(dataset.images)):
        present = np.flatnonzero(dataset.labels[i] > 0.5)
        absent = np.flatnonzero(dataset.labels[i] < 0.5)
        n_q = min(len(present), len(absent))
        negs = rng.choice(absent, size=n_q, replace=False)
        for c in present[:n_q]:
            img_idx.append(i), cls_idx.append(int(c)), labels.append(1.0)
        for c in negs:
            img_idx.append(i), cls_idx.append(int(c)), labels.append(0.0)
    return np.array(img_idx), np.array(cls_idx), np.array(labels, dtype=np.float64)


def run_eval(cfg: ExperimentConfig) -> dict:
    """Evaluate the trained systems of an experiment; writes metrics.json."""
    store, train_ids, test_ids = make_store(cfg)
    exp = cfg.experiment
    metrics: dict = {"experiment": exp, "systems": {}}

    if exp == "exp1_union":
        spec = overlay_spec(cfg)
        for name in system_names(cfg):
            ckpt = load_checkpoint(_ckpt_path(cfg, name))
            model = UnionModel.from_checkpoint(ckpt)
            metrics["systems"][name] = eval_union_system(
                model, store, test_ids, k=cfg.k, cap=cfg.cap, spec=spec,
                seed=cfg.seed, n_episodes=cfg.eval_episodes, tradem=(name == "tradem"))
        if cfg.baselines:
            metrics["systems"]["mf"] = eval_mf(cfg.k, cfg.cap, cfg.seed, cfg.eval_episodes)
    elif exp in ("exp2_containment", "exp3_scene"):
        scene_spec = grid_spec(cfg) if exp == "exp3_scene" else overlay_spec(cfg)
        ref_spec = overlay_spec(cfg)
        tcfg = train_config(cfg, batch_size=cfg.eval_batch)
        systems: dict = {}
        tradem_model = None
        for name in system_names(cfg):
            ckpt = load_checkpoint(_ckpt_path(cfg, name))
            if name.startswith("h_"):
                systems[name] = QueryScorer(QueryModel.from_checkpoint(ckpt))
            else:
                tradem_model = UnionModel.from_checkpoint(ckpt)
                systems["tradem"] = TradEmScorer(tradem_model)
        if exp == "exp3_scene" and tradem_model is not None:
            systems["slidewin"] = SlideWinScorer(tradem_model, max_grid=cfg.max_grid)
        results = eval_containment(systems, store, test_ids, tcfg, scene_spec, ref_spec, cfg.seed, cfg.eval_episodes)
        thresholds = _containment_thresholds(cfg, systems, store, train_ids, tcfg, scene_spec, ref_spec)
        for name, res in results.items():
            scores, labels = res["scores"], res["labels"]
            metrics["systems"][name] = {
                "accuracy": binary_accuracy(scores, labels, threshold=thresholds[name]),
                "auc": auc_rank(scores, labels),
                "threshold": thresholds[name],
                "n": int(labels.size),
            }
    else:
        test_set = make_supervised_dataset(cfg, store, split="test")
        img_idx, cls_idx, labels = supervised_queries(test_set, cfg.seed)
        for name in system_names(cfg):
            ckpt = load_checkpoint(_ckpt_path(cfg, name))
            if name == "model3":
                model = SupervisedModel.from_checkpoint(ckpt)
            else:
                model = MultilabelBaseline.from_checkpoint(ckpt)
            probs = model.predict(test_set.images)
            scores = probs[img_idx, cls_idx]
            metrics["systems"][name] = {
                "accuracy": binary_accuracy(scores, labels, threshold=0.5),
                "auc": auc_rank(scores, labels),
                "n": int(labels.size),
            }

    _write_json(cfg, "metrics.json", metrics)
    _write_manifest(cfg, {"metrics": os.path.join(cfg.out_dir, "metrics.json")}, stage="eval")
    return metrics


def _containment_thresholds(cfg, systems, store, train_ids, tcfg, scene_spec, ref_spec) -> dict[str, float]:
    """Fixed 0.5 thresholds for h and TradEm; SlideWin calibrates on held-out
    validation pairs drawn from the training classes."""
    thresholds = {name: 0.5 for name in systems if name.startswith("h_")}
    if "tradem" in systems:
        thresholds["tradem"] = -0.5  # score is negated distance; distance < 0.5
    if "slidewin" in systems:
        n_ep = max(1, cfg.calibration_pairs // tcfg.batch_size)
        res = eval_containment({"slidewin": systems["slidewin"]}, store, train_ids, tcfg,
                               scene_spec, ref_spec, cfg.seed, n_ep, tag=505)
        distances = -res["slidewin"]["scores"]
        cutoff = calibrate_distance_threshold(distances, res["slidewin"]["labels"])
        thresholds["slidewin"] = -cutoff  # back on the negated-distance score axis
    return thresholds


# ---------------------------------------------------------------------------
# report and preview stages


_TABLE1_COLUMNS = ("g_dnn", "g_linfc", "g_lin", "g_mean", "tradem", "mf")
_TABLE23_COLUMNS = ("h_dnn", "h_linfc", "h_lin", "tradem", "slidewin")


def _csv_line(cells) -> str:
    return ",".join(str(c) for c in cells) + "\n"


def _fmt(x: float) -> str:
    return f"{100.0 * x:.1f}"


def run_report(cfg: ExperimentConfig) -> list[str]:
    """Turn metrics.json into CSV tables shaped like the headline tables,
    plus loss-curve plots from the training traces."""
    path = os.path.join(cfg.out_dir, "metrics.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"metrics.json not found in {cfg.out_dir}; run eval first")
    with open(path, "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    systems = metrics["systems"]
    written: list[str] = []
    stamp = f"# experiment={cfg.experiment} config_sha256={cfg.hash} seed={cfg.seed}\n"

    if cfg.experiment == "exp1_union":
        cols = [c for c in _TABLE1_COLUMNS if c in systems]
        out = os.path.join(cfg.out_dir, "table_labelsets.csv")
        sizes = sorted({s for c in cols for s in systems[c]["counts"]}, key=int)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(stamp)
            fh.write(_csv_line(["stratum", "metric"] + cols))
            for stratum in ["all"] + sizes:
                label = "All" if stratum == "all" else f"{stratum}-sets"
                for metric in ("exact", "top3"):
                    row = [label, "Exact" if metric == "exact" else "Top-3"]
                    row += [_fmt(systems[c][metric].get(stratum, float("nan"))) for c in cols]
                    fh.write(_csv_line(row))
            fh.write(_csv_line(["SetSize", "All"] + [_fmt(systems[c]["size_accuracy"]) for c in cols]))
        written.append(out)
    elif cfg.experiment in ("exp2_containment", "exp3_scene"):
        cols = [c for c in _TABLE23_COLUMNS if c in systems]
        out = os.path.join(cfg.out_dir, "table_queries.csv")
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(stamp)
            fh.write(_csv_line(["metric"] + cols))
            fh.write(_csv_line(["Acc %"] + [_fmt(systems[c]["accuracy"]) for c in cols]))
            fh.write(_csv_line(["AUC"] + [_fmt(systems[c]["auc"]) for c in cols]))
        written.append(out)
    else:
        cols = [c for c in ("model3", "indep_sigmoid") if c in systems]
        out = os.path.join(cfg.out_dir, "table_supervised.csv")
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(stamp)
            fh.write(_csv_line(["metric"] + cols))
            fh.write(_csv_line(["Acc %"] + [_fmt(systems[c]["accuracy"]) for c in cols]))
            fh.write(_csv_line(["AUC"] + [_fmt(systems[c]["auc"]) for c in cols]))
        written.append(out)

    written.extend(_plot_traces(cfg))
    _write_manifest(cfg, {os.path.basename(p): p for p in written}, stage="report")
    return written


def _plot_traces(cfg: ExperimentConfig) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    traces = []
    for name in system_names(cfg):
        path = os.path.join(cfg.out_dir, f"trace_{name}.jsonl")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                rows = [json.loads(line) for line in fh if line.strip()]
            if rows:
                traces.append((name, rows))
    if not traces:
        return []
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in traces:
        steps = [r["step"] for r in rows]
        losses = np.array([r["loss"] for r in rows])
        if len(losses) > 50:
            kernel = np.ones(25) / 25.0
            losses = np.convolve(losses, kernel, mode="valid")
            steps = steps[12: 12 + len(losses)]
        ax.plot(steps, losses, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (smoothed)")
    ax.set_title(f"{cfg.experiment} (seed {cfg.seed})")
    ax.legend()
    out = os.path.join(cfg.out_dir, "loss_curves.png")
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return [out]


def run_preview(cfg: ExperimentConfig) -> list[str]:
    """Render one composite per candidate label set (an episode of test
    classes) as individual PNGs plus a montage in canonical order."""
    store, _, test_ids = make_store(cfg)
    spec = grid_spec(cfg) if cfg.experiment == "exp3_scene" else overlay_spec(cfg)
    rng = np.random.default_rng([cfg.seed, 404])
    episode = _draw_episode(store, test_ids, cfg.k, rng)
    candidates = enumerate_label_sets(cfg.k, cfg.cap)
    os.makedirs(cfg.out_dir, exist_ok=True)
    meta = {"config_sha256": cfg.hash, "seed": str(cfg.seed)}
    written = []
    tiles = []
    render = render_scene if spec.mode == GRID_SCENE else render_composite
    for t in candidates:
        scene = render(store, episode, t, spec, rng)
        name = "set_" + "-".join(str(i) for i in canonical_elements(t)) + ".png"
        path = os.path.join(cfg.out_dir, name)
        save_png(scene.image, path, metadata={**meta, "label_set": str(t)})
        written.append(path)
        tiles.append(scene.image)
    cols = cfg.k
    rows = (len(tiles) + cols - 1) // cols
    h, w = tiles[0].shape
    montage = np.ones((rows * h + (rows - 1) * 2, cols * w + (cols - 1) * 2), dtype=np.float32)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        montage[r * (h + 2): r * (h + 2) + h, c * (w + 2): c * (w + 2) + w] = tile
    path = os.path.join(cfg.out_dir, "preview_montage.png")
    save_png(montage, path, metadata=meta)
    written.append(path)
    _write_manifest(cfg, {os.path.basename(p): p for p in written}, stage="preview")
    return written
