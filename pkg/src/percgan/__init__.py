"""Unaligned image-to-image translation with perceptual discriminators.

The discriminator wraps a frozen pretrained conv trunk whose feature
pyramid is fused by small learnable combiner blocks and scored by a scalar
head plus optional per-patch heads. Generators are shape-preserving
encoder-residual-decoder networks pretrained as autoencoders before
adversarial training in single-direction or cycle mode.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    LoadError,
    NumericError,
    PartitionError,
    PercganError,
    ShapeError,
    SurgeryError,
)
from .refnet import (
    ArchDescriptor,
    BlockPartition,
    ChainTrunk,
    FeaturePyramid,
    LayerSpec,
    ReferenceNet,
    apply_surgery,
    default_boundaries,
    extract_features,
    load_reference_weights,
    partition,
    random_reference_net,
    save_reference_weights,
    surgery_descriptor,
    toy_descriptor,
    trainable_trunk,
    vgg19_descriptor,
)
from .percdisc import (
    CombinerBlock,
    DiscriminatorOutput,
    MainHead,
    PatchHead,
    PerceptualDiscriminator,
    build_perceptual_discriminator,
    combine,
)
from .generator import GeneratorNet, build_generator, receptive_field, translate
from .objectives import (
    LEAST_SQUARES,
    NON_SATURATING,
    AdversarialFormulation,
    LossReport,
    adv_discriminator_loss,
    adv_generator_loss,
    cycle_loss,
    identity_loss,
    reconstruction_loss,
)
from .data import (
    BatchSampler,
    DomainDataset,
    PreprocessSpec,
    load_domain,
    next_batch,
    synth_toy_domains,
)
from .evalkit import (
    AttributeScore,
    C2STResult,
    EvalConfig,
    SmallConvClassifier,
    attribute_logloss,
    c2st,
    export_metrics,
    read_metrics,
    save_montage,
    train_attribute_classifier,
)
from .trainer import (
    TrainingConfig,
    TrainState,
    init_state,
    load_checkpoint,
    pretrain_generator,
    run_training,
    save_checkpoint,
    train_step_cycle,
    train_step_single,
)
from .config import FrameworkConfig, build_models, load_config

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor", "AdversarialFormulation", "AttributeScore",
    "BatchSampler", "BlockPartition", "C2STResult", "ChainTrunk",
    "CheckpointError", "CombinerBlock", "ConfigError", "DataError",
    "DiscriminatorOutput", "DivergenceError", "DomainDataset", "EvalConfig",
    "FeaturePyramid", "FrameworkConfig", "GeneratorNet", "LayerSpec",
    "LoadError", "LossReport", "MainHead", "NumericError", "PartitionError",
    "PatchHead", "PercganError", "PerceptualDiscriminator", "PreprocessSpec",
    "LEAST_SQUARES", "NON_SATURATING",
    "ReferenceNet", "ShapeError", "SmallConvClassifier", "SurgeryError",
    "TrainState", "TrainingConfig",
    "adv_discriminator_loss", "adv_generator_loss", "apply_surgery",
    "attribute_logloss", "build_generator", "build_models",
    "build_perceptual_discriminator", "c2st", "combine", "cycle_loss",
    "default_boundaries", "export_metrics", "extract_features",
    "identity_loss", "init_state", "load_checkpoint", "load_config",
    "load_domain", "load_reference_weights", "next_batch", "partition",
    "pretrain_generator", "random_reference_net", "read_metrics",
    "receptive_field", "reconstruction_loss", "run_training",
    "save_checkpoint", "save_montage", "save_reference_weights",
    "surgery_descriptor", "synth_toy_domains", "toy_descriptor",
    "train_attribute_classifier", "train_step_cycle", "train_step_single",
    "trainable_trunk", "translate", "vgg19_descriptor",
]
