"""Tooling for reference-based distinctive image captioning.

Submodules:
    corpus       caption ingestion, tokenization, n-gram extraction
    sgparse      lexicon-driven scene-graph parsing and overlap scoring
    grouping     two-stage reference group construction
    metrics      CIDEr and DisCIDEr
    regionmatch  similar-region matching
    twoflow      Two-Flow Encoder forward/backward and gradient checking
    losses       cross-entropy and mean-baseline policy-gradient losses
    cli          command-line entry point
"""

__version__ = "0.1.0"
