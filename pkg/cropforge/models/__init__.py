from .core import (
    AnnotatedSample,
    DatasetManifest,
    Proposal,
    SceneObject,
    SceneSpec,
    SchemaKind,
    TextAnnotation,
    load_manifest,
    load_samples,
    save_manifest,
    save_sample,
)
