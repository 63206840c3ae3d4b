"""Semantic clip descriptors and dense video captioning at desk scale."""

from ._core import (
    SemdvcError,
    SynthConfig,
    assign,
    attention,
    bleu,
    cooccurrences,
    fit_anchors,
    fit_codebook,
    inertia,
    load_matrix,
    positional_encoding,
    proposal_prf,
    read_report,
    run_all,
    run_stage,
    save_matrix,
    stage_names,
    synth_corpus,
    tiou,
    tokenize,
    train_embeddings,
    weight,
)

__all__ = [name for name in dir() if not name.startswith("_")]
