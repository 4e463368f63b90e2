from .annotate import (
    ClassTable,
    FrequencyBands,
    KMeansResult,
    balanced_kmeans,
    build_class_table,
    embed_phrase,
    extract_action_phrases,
    frequency_bands,
)
from .synth import (
    Dataset,
    GeneratorConfig,
    MotionSample,
    generate_synthetic,
    read_dataset,
    write_dataset,
)
