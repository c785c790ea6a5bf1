"""Contextual (ProdBERT) and static (prod2vec) product embeddings from shopping sessions."""

from .eval_nep import EvalReport, eval_prod2vec, eval_prodbert, hit_rate_at_k, ndcg_at_k, sample_cases
from .prod2vec import Prod2vecConfig, Prod2vecModel, train_cbow
from .prodbert import (
    ProdBertConfig,
    ProdBertModel,
    encode_session,
    init_model,
    load_checkpoint,
    predict_masked,
    save_checkpoint,
    train_mlm,
)
from .session_data import Session, Vocabulary, build_vocab, duplicate, filter_by_length, ingest, split
from .synth import Catalog, GenParams, generate_catalog, generate_sessions

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "EvalReport",
    "GenParams",
    "Prod2vecConfig",
    "Prod2vecModel",
    "ProdBertConfig",
    "ProdBertModel",
    "Session",
    "Vocabulary",
    "build_vocab",
    "duplicate",
    "encode_session",
    "eval_prod2vec",
    "eval_prodbert",
    "filter_by_length",
    "generate_catalog",
    "generate_sessions",
    "hit_rate_at_k",
    "ingest",
    "init_model",
    "load_checkpoint",
    "ndcg_at_k",
    "predict_masked",
    "sample_cases",
    "save_checkpoint",
    "split",
    "train_cbow",
    "train_mlm",
]
