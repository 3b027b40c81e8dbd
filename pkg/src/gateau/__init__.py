"""Long-context instruction data curation.

Ranks long instruction-following samples by how much their responses depend
on distant context, using a homologous model pair (perplexity guidance) and
segment-level attention/importance agreement (contextual awareness), then
selects a top fraction and mixes it with short instruction data.
"""

from gateau.cam import CamProfile, build_profile, contextual_awareness
from gateau.config import BackendSpec, RunConfig, load_config
from gateau.copylm import CopyLMParams
from gateau.corpus import MixSpec, Sample, TruncationPolicy, load_corpus, mix_training_set
from gateau.errors import (
    BackendError,
    CacheError,
    ConfigError,
    CorpusError,
    GateauError,
    ProtocolError,
    SelectionError,
)
from gateau.gateway import Backend, InProcessCopyBackend, LineProtocolBackend
from gateau.hmg import HmgRecord, check_homologous, compute_hmg, perplexity
from gateau.pipeline import run_emit, run_score, run_select
from gateau.protocol import BackendDescriptor, ScoringRequest, ScoringResponse
from gateau.ranker import FinalScoreRecord, SelectionManifest, combine, select

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendDescriptor",
    "BackendError",
    "BackendSpec",
    "CacheError",
    "CamProfile",
    "ConfigError",
    "CopyLMParams",
    "CorpusError",
    "FinalScoreRecord",
    "GateauError",
    "HmgRecord",
    "InProcessCopyBackend",
    "LineProtocolBackend",
    "MixSpec",
    "ProtocolError",
    "RunConfig",
    "Sample",
    "ScoringRequest",
    "ScoringResponse",
    "SelectionError",
    "SelectionManifest",
    "TruncationPolicy",
    "build_profile",
    "check_homologous",
    "combine",
    "compute_hmg",
    "contextual_awareness",
    "load_config",
    "load_corpus",
    "mix_training_set",
    "perplexity",
    "run_emit",
    "run_score",
    "run_select",
    "select",
]
