"""GAN variants for anesthetic dose-history augmentation, with a PK-PD ground truth."""
from .losses import VARIANTS, VariantConfig
from .pkpd import DoseHistory, PatientModel, simulate_bis, synth_dataset

__version__ = "0.1.0"
__all__ = ["VARIANTS", "VariantConfig", "DoseHistory", "PatientModel", "simulate_bis",
           "synth_dataset", "__version__"]
