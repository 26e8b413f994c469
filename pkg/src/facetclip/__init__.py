"""Language-image pretraining against a frozen byte-level LM at desk scale.

A trainable vision transformer is contrastively aligned with per-facet text
embeddings extracted from a frozen decoder-only transformer: each caption runs
once through the LM with several facet prompts sharing one prefix KV cache,
under a block attention mask that keeps the facets independent.
"""

from .align import (
    AdamW,
    AlignModel,
    CombinedTextSource,
    OnTheFlyTextSource,
    Projection,
    Temperature,
    TrainConfig,
    contrastive_loss,
    load_checkpoint,
    load_model,
    save_checkpoint,
    train,
)
from .errors import FacetClipError
from .evaluation import RetrievalReport, VocabMap, recall_at_k, vocab_map, zero_shot_classify
from .facets import FacetEmbeddings, bench_fda, build_mask, embed_multifacet, embed_naive
from .lm import (
    PRESETS,
    FrozenLM,
    KVCache,
    LMConfig,
    build_kv_cache,
    forward_hidden,
    init_lm,
    lm_head,
    load_weights,
    save_weights,
)
from .masks import CausalMask, FacetMask
from .prompts import (
    ConcatLayout,
    FacetPrompt,
    PromptSet,
    assemble_concat,
    assemble_single,
    builtin_prompts,
    default_prompts,
    load_prompts,
)
from .store import (
    Corpus,
    CorpusRecord,
    EmbeddingStore,
    load_corpus,
    open_store_dir,
    precompute,
    read_shard,
    write_shard,
)
from .synth import Scene, generate_dataset
from .vit import VisionTransformer, ViTConfig, encode_image, patchify

__version__ = "0.1.0"
