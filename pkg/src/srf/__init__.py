"""Neural estimators of spatially resolved X-ray radiation fields.

Set the RF_THREADS environment variable before the first import to pin
the BLAS thread count (it is forwarded to the usual OpenMP/MKL/BLAS
variables); reproducibility of bitwise results does not depend on it,
but timing benchmarks do.
"""

import os as _os

if "RF_THREADS" in _os.environ:
    _n = _os.environ["RF_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _n)

__version__ = "0.1.0"

from . import errors                                            # noqa: E402
from .container import read_field, write_field                  # noqa: E402
from .field import (BeamParams, ConeBeam, FieldChannel,         # noqa: E402
                    KermaCoefficients, RadiationField, RectBeam,
                    compute_stats, split_dataset)
from .normalize import Normalizer                               # noqa: E402
from .synth import GeneratorConfig, gen_dataset, gen_field      # noqa: E402

__all__ = [
    "errors", "read_field", "write_field", "BeamParams", "ConeBeam",
    "FieldChannel", "KermaCoefficients", "RadiationField", "RectBeam",
    "compute_stats", "split_dataset", "Normalizer", "GeneratorConfig",
    "gen_dataset", "gen_field", "__version__",
]
