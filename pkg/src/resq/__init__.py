"""Mixed-precision post-training quantization with a PCA-selected high-precision subspace."""

from .linalg import eigh_symmetric, fast_hadamard_transform, hadamard, random_orthogonal
from .projection import CalibStats, ProjectionBasis, ProjectionSet, build_baseline_basis, build_resq_basis, theorem1_bound
from .quant import QuantConfig, dequantize, fake_quant, quant_snr, quantize

__version__ = "0.1.0"
