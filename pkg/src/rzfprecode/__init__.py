"""Frequency-domain ZF and RZF downlink precoding for single-carrier massive MIMO."""

__version__ = "0.1.0"

from .channel import (
    ChannelImpulse,
    ChannelRealization,
    PowerDelayProfile,
    circular_convolve,
    generate_channel,
    to_frequency,
)
from .detector import DetectionResult, detect_bin, measure_sinr, time_domain_symbols
from .errors import ConfigError, InvariantError, NumericalError, RZFError
from .harness import SimResult, SystemConfig, emit_outputs, run_sweep, validate_fd_model
from .precoder import (
    ComplexityReport,
    PowerAllocation,
    complexity_report,
    optimize_powers,
    rzf_precode_bin,
    zf_precode_bin,
)
from .scalars import (
    ScalarEntry,
    ScalarTable,
    WishartSpec,
    build_table,
    compute_alpha,
    compute_lambda_alpha,
    compute_lambda_beta,
    compute_sigma2_od,
    lookup,
    wishart_pdf,
)
