"""Reuse of precomputed attention maps for prefill-only transformer inference."""

from .amstore import AttnStore, MappedAttnView, StoreClosedError, StoreError
from .bench import Corpus, emit_csv, gamma, generate_corpus, run_experiment, sweep_threshold
from .engine import (
    EngineConfig, HitStats, build_databases, calibrate_san, infer, infer_attncache_f, infer_lazyformer,
    infer_san, js_divergence, search_engine,
)
from .model import (
    AttentionRecord, AttnCache, InputEmbedding, ModelConfig, ModelWeights, encode, forward_capture,
    forward_with_cache, sentence_embedding, tokenize,
)
from .projector import FeatureProjector, attention_label, pool, project, siamese_distance, smooth_l1, train
from .vecindex import VectorIndex

__version__ = "0.1.0"
