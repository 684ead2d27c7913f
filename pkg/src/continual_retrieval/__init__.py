"""Continual embedding training with a backward-consistent retrieval gallery.

Trains an embedding model over a sequence of sessions while keeping old
gallery embeddings frozen and comparable: discrimination within a session,
coherence with the neighboring model, and coherence with replayed class
centroids across all sessions.
"""

from .diffcore import GradTape, Tensor, backward
from .errors import ContractError, DimensionError
from .gallery import (GallerySet, average_recall, classification_accuracy,
                      extract_and_append, recall_at_k, retrieve)
from .losses import (BatchView, ClassIndexSets, LossReport,
                     loss_inter_data_coherence, loss_intra_discrimination,
                     loss_neighbor_model_coherence, mine_hardest_negative,
                     total_loss)
from .model import (Hyperparameters, ModelSnapshot, ModelState, SgdMomentum,
                    snapshot)
from .replay import CentroidStore, ReplayBuffer, mine_exemplars, rebalance
from .runner import (RunConfig, RunReport, grad_check_suite, run_ablation_sweep,
                     run_experiment, train_session)
from .sessions import (Dataset, SessionPlan, blurry_split, disjoint_split,
                       general_split, import_csv, load_dataset, make_synthetic,
                       sample_validation_queries, save_dataset)

__version__ = "0.1.0"

__all__ = [
    "BatchView", "CentroidStore", "ClassIndexSets", "ContractError", "Dataset",
    "DimensionError", "GallerySet", "GradTape", "Hyperparameters", "LossReport",
    "ModelSnapshot", "ModelState", "ReplayBuffer", "RunConfig", "RunReport",
    "SessionPlan", "SgdMomentum", "Tensor", "average_recall", "backward",
    "blurry_split", "classification_accuracy", "disjoint_split",
    "extract_and_append", "general_split", "grad_check_suite", "import_csv",
    "load_dataset", "loss_inter_data_coherence", "loss_intra_discrimination",
    "loss_neighbor_model_coherence", "make_synthetic", "mine_exemplars",
    "mine_hardest_negative", "rebalance", "recall_at_k", "retrieve",
    "run_ablation_sweep", "run_experiment", "sample_validation_queries",
    "save_dataset", "snapshot", "total_loss", "train_session",
]
