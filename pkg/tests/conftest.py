import os

# pin BLAS threads before numpy loads anywhere: small matrices are
# overhead-bound and single-threaded kernels keep results reproducible
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
