"""Mixed-effects spectral VAR models for group-level multichannel connectivity."""

from .data import (DEFAULT_BANDS, BandDefinition, MultiChannelSeries, StudyDataset,
                   SubjectRecord, load_manifest, preprocess, save_manifest, standardize)
from .exceptions import (ChannelMismatchError, ConvergenceError, DataError,
                         DegenerateChannelError, ManifestError, MeSpecVarError,
                         NumericalError, SimulationError)
from .filtering import decompose_bands, design_bandpass, filtfilt
from .inference import (diff_graphs, fixed_effect_inference, granger_edges, lrt_edge,
                        random_sd_heatmaps, welch_group_difference, welch_table)
from .mixed import (MixedDesign, MixedVarFit, OptimizerConfig, build_design,
                    design_from_arrays, fit_ml, fit_ml_nested, fit_reml, profiled_deviance)
from .simulation import SimulationConfig, run_replicates
from .var import (companion_spectral_radius, fit_var_lassle, fit_var_ols,
                  information_criteria, select_lag)

__version__ = "0.1.0"
