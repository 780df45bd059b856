"""Compositional set embeddings over label sets.

An encoder is trained jointly with either a set-union composition head
(decode a query against the embedding table of every candidate subset) or a
set-containment query head (score whether one image's classes subsume
another's), using only one-shot episodic supervision on composited glyph
scenes; a supervised variant answers fixed-inventory class queries.
"""

from .labelsets import Episode, LabelSet, canonical_elements, enumerate_label_sets, is_subset, union
from .render import (
    GlyphStore,
    RenderSpec,
    Scene,
    affine_jitter,
    load_glyph_store,
    render_composite,
    render_scene,
    synth_glyph_store,
)
from .nets import EncoderConfig, GHead, HHead, LabelEmbedder, Model3Config, Model3Head, build_encoder, encode
from .compose import SubsetTable, build_subset_table, decode_nearest_subset, infer_label_set, query_contains
from .losses import bce_query_loss, triplet_margin_loss, weighted_multilabel_bce
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .training import (
    QueryModel,
    SupervisedModel,
    TrainConfig,
    UnionModel,
    sample_episode,
    sample_negative,
    train_model1,
    train_model2,
    train_model3,
)
from .baselines import mf_predict, slidewin_query, slidewin_windows, tradem_predict_set, tradem_query, tradem_train
from .metrics import auc_rank, binary_accuracy, labelset_report

__version__ = "0.1.0"

__all__ = [
    "Episode", "LabelSet", "canonical_elements", "enumerate_label_sets", "is_subset", "union",
    "GlyphStore", "RenderSpec", "Scene", "affine_jitter", "load_glyph_store",
    "render_composite", "render_scene", "synth_glyph_store",
    "EncoderConfig", "GHead", "HHead", "LabelEmbedder", "Model3Config", "Model3Head",
    "build_encoder", "encode",
    "SubsetTable", "build_subset_table", "decode_nearest_subset", "infer_label_set", "query_contains",
    "bce_query_loss", "triplet_margin_loss", "weighted_multilabel_bce",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "QueryModel", "SupervisedModel", "TrainConfig", "UnionModel",
    "sample_episode", "sample_negative", "train_model1", "train_model2", "train_model3",
    "mf_predict", "slidewin_query", "slidewin_windows", "tradem_predict_set", "tradem_query", "tradem_train",
    "auc_rank", "binary_accuracy", "labelset_report",
]
