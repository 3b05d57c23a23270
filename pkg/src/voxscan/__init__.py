"""Selective state-space classifier for volumetric scans.

Importing the package loads every module so the differentiable-op registry is
complete before anything builds a model or runs a check.
"""

from . import cli, metrics, model, ssm, tensor, train, volumes
from .errors import (CheckpointError, DivergenceError, GraphError,
                     NiftiFormatError, NumericsError, ShapeError,
                     ValidationError, VoxscanError)
from .metrics import (ClassMetrics, ConfusionMatrix, EvalReport, accuracy,
                      build_report, class_metrics, confusion, f1,
                      precision_recall, report_emit, report_from_json,
                      report_to_csv, report_to_json)
from .model import (Model, ModelConfig, PatchGrid, model_forward,
                    reference_config, tiny_config, traversal_orders)
from .ssm import (SCAN_MODES, SsmParams, hippo_diag_init, scan, scan_arrays,
                  scan_check, selective_scan, unrolled_oracle)
from .tensor import (Parameter, Tensor, finite_checks, finite_diff,
                     grad_check_all, grad_check_op, no_grad)
from .train import (Checkpoint, TrainConfig, checkpoint_id, checkpoint_load,
                    checkpoint_save, cross_entropy, evaluate, history_csv,
                    model_grad_check, train_loop)
from .volumes import (ClassLabel, DatasetManifest, ManifestEntry, SynthSpec,
                      Volume, load_dataset, load_manifest, normalize01,
                      read_nifti, read_nifti_file, resize_to, save_manifest,
                      stratified_split, synth_generate, write_nifti,
                      write_nifti_file)

__version__ = "0.1.0"
