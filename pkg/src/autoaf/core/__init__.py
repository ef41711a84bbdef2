from . import tape as ad
from .fft import FFTSizeError, fft, ifft, is_power_of_two, naive_dft
from .tape import ContractError, Tape, Var, const, detach, grad, no_grad

__all__ = [
    "ad", "ContractError", "FFTSizeError", "Tape", "Var", "const", "detach",
    "fft", "grad", "ifft", "is_power_of_two", "naive_dft", "no_grad",
]
