import asyncio
import numpy as np
from pylime.config import LimeConfig

__all__ = ["run_async", "numeric_grad", "relative_error", "tiny_config"]

def run_async(func):
    def wrapper(*args, **kwargs):
        asyncio.run(func(*args, **kwargs))
    return wrapper

def numeric_grad(f, x:np.ndarray, eps:float=1e-3) -> np.ndarray:
    '''Central finite differences of a scalar function of x (x is restored).'''
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad

def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)

def tiny_config(**kwargs) -> LimeConfig:
    values = dict(vocab_size=11, hidden_size=8, intermediate_size=16, num_layers=2, num_heads=2, num_kv_heads=2, max_seq=16)
    values.update(kwargs)
    return LimeConfig(**values)
