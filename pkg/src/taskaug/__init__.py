"""Task-driven learned data augmentation for cardiac MR segmentation."""

from .data import (GROUPS, N_CLASSES, STRUCTURES, DatasetSplit, Provenance, SliceBatch,
                   VolumeRecord, make_split, make_synthetic_dataset, preprocess_volume,
                   sample_labelled_subset)
from .errors import (DegenerateVolume, EmptySplit, InsufficientSubjects, NonFiniteLoss,
                     ShapeMismatch, TaskAugError, UnpairedRuns)
from .experiment import METHODS, run_matrix, summarize, wilcoxon_signed_rank
from .generative import (AugmentorLossWeights, ConditionalGenerator, Discriminator,
                         GeneratorConfig, discriminator_loss, generator_loss, synthesize_pair)
from .segmentation import UNet, dice_score, weighted_cross_entropy
from .training import (TrainConfig, TrainingData, desk_config, train_augmentor_joint,
                       train_method, train_segmenter_augmented)
from .warp import warp_bilinear, warp_labels

__version__ = "0.1.0"
