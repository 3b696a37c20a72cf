"""Patch-wise adversarial attacks on small vision transformers and CNNs."""

from .attacks import AdversarialExample, AttackConfig, attack_batch, patch_fool_attack, pgd_attack
from .harness import Dataset, RobustnessReport, evaluate_robust, load_dataset, make_shapes_dataset, train_model
from .models import PatchGrid, TinyCNN, TinyCNNConfig, TinyViT, TinyViTConfig, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdversarialExample", "AttackConfig", "Dataset", "PatchGrid", "RobustnessReport", "TinyCNN",
    "TinyCNNConfig", "TinyViT", "TinyViTConfig", "attack_batch", "evaluate_robust", "load_checkpoint",
    "load_dataset", "make_shapes_dataset", "patch_fool_attack", "pgd_attack", "train_model",
]
