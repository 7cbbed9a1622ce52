from functools import lru_cache
from decouple import config

class Settings:
    # Solver settings
    SOLVER_BACKEND: str = config("SOLVER_BACKEND", default="ipm")
    SOLVER_TOLERANCE: float = config("SOLVER_TOLERANCE", default=1e-8, cast=float)
    SOLVER_MAX_ITER: int = config("SOLVER_MAX_ITER", default=100, cast=int)
    SOLVER_REGULARIZATION: float = config("SOLVER_REGULARIZATION", default=1e-9, cast=float)
    SOLVER_REFINEMENT_STEPS: int = config("SOLVER_REFINEMENT_STEPS", default=1, cast=int)
    SOLVER_VERBOSE: bool = config("SOLVER_VERBOSE", default=False, cast=bool)

    # Model settings
    EPS_THETA: float = config("EPS_THETA", default=0.05, cast=float)
    RAMP_FRACTION: float = config("RAMP_FRACTION", default=0.75, cast=float)
    RAMP_MODE: str = config("RAMP_MODE", default="scaled")
    RES_RATING_FACTOR: float = config("RES_RATING_FACTOR", default=1.1, cast=float)
    RES_PENETRATION: float = config("RES_PENETRATION", default=0.0, cast=float)

    # Robust counterpart settings
    BIG_M_FACTOR: float = config("BIG_M_FACTOR", default=1e4, cast=float)
    ORIENTATION_MAX_ROUNDS: int = config("ORIENTATION_MAX_ROUNDS", default=8, cast=int)
    EXACTNESS_FIX_TOL: float = config("EXACTNESS_FIX_TOL", default=1e-6, cast=float)

    # Power flow / validation settings
    PF_TOLERANCE: float = config("PF_TOLERANCE", default=1e-8, cast=float)
    PF_MAX_ITER: int = config("PF_MAX_ITER", default=50, cast=int)
    FEASIBILITY_TOL: float = config("FEASIBILITY_TOL", default=1e-6, cast=float)
    N_SCENARIOS: int = config("N_SCENARIOS", default=10000, cast=int)
    SEED: int = config("SEED", default=0, cast=int)
    OUT_OF_RANGE_WIDTH: float = config("OUT_OF_RANGE_WIDTH", default=0.05, cast=float)
    VALIDATION_WORKERS: int = config("VALIDATION_WORKERS", default=1, cast=int)
    UNCERTAINTY_WARN_LEVEL: float = config("UNCERTAINTY_WARN_LEVEL", default=0.15, cast=float)

    # Application settings
    OUTPUT_DIR: str = config("OUTPUT_DIR", default="results")
    LOG_LEVEL: str = config("LOG_LEVEL", default="INFO")

@lru_cache()
def get_settings():
    return Settings()
