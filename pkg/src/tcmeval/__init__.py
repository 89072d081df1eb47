"""Knowledge-grounded evaluation harness for drug-ingredient recall in language models.

The package covers the full loop: loading a pharmacopoeia-style corpus,
building adversarially perturbed verification datasets, querying providers
(remote chat-completion APIs or deterministic simulators, optionally wrapped
in BM25 retrieval grounding), and scoring the resulting run logs.
"""

__version__ = "0.1.0"

from tcmeval.corpus import (
    Corpus,
    CorpusError,
    DrugRecord,
    Ingredient,
    load_corpus,
    load_corpus_csv,
    make_record,
    normalize_name,
    parse_ingredient,
    sample_corpus_path,
)
from tcmeval.dataset import (
    DatasetError,
    EvalDataset,
    EvalItem,
    build_dataset,
    load_dataset,
    perturb_ingredients,
    save_dataset,
    split_halves,
    subset_view,
)
from tcmeval.retrieval import Index, RetrievedEntry, build_index, search, tokenize

__all__ = [
    "Corpus",
    "CorpusError",
    "DatasetError",
    "DrugRecord",
    "EvalDataset",
    "EvalItem",
    "Index",
    "Ingredient",
    "RetrievedEntry",
    "__version__",
    "build_dataset",
    "build_index",
    "load_corpus",
    "load_corpus_csv",
    "load_dataset",
    "make_record",
    "normalize_name",
    "parse_ingredient",
    "perturb_ingredients",
    "sample_corpus_path",
    "save_dataset",
    "search",
    "split_halves",
    "subset_view",
    "tokenize",
]
