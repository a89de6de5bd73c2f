import numpy as np
import pytest
import torch

from reglab.core import DisplacementField, Volume


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def ramp_volume(n=8, axis=0):
    """V(x,y,z) = x/(n-1) along the chosen axis."""
    coords = torch.arange(n, dtype=torch.float32) / (n - 1)
    shape = [1, 1, 1]
    shape[axis] = n
    data = coords.reshape(shape).expand(n, n, n).contiguous()
    return Volume(data)


def blob_volume(n=8, seed=0, n_blobs=4):
    """Smooth volume made of seeded Gaussian bumps, normalized to [0,1]."""
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    data = np.zeros((n, n, n))
    for _ in range(n_blobs):
        center = rng.uniform(1, n - 2, size=3)
        sigma = rng.uniform(n / 6, n / 3)
        d2 = ((grid - center) ** 2).sum(-1)
        data += rng.uniform(0.3, 1.0) * np.exp(-d2 / (2 * sigma**2))
    data -= data.min()
    data /= data.max()
    return Volume(torch.from_numpy(data).float())


def smooth_field(n=8, seed=0, amplitude=1.0, level=0):
    """Seeded smooth displacement field with max magnitude `amplitude`."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    vec = rng.standard_normal((n, n, n, 3))
    for c in range(3):
        vec[..., c] = gaussian_filter(vec[..., c], sigma=2.0)
    mag = np.sqrt((vec**2).sum(-1)).max()
    if mag > 0:
        vec *= amplitude / mag
    return DisplacementField(torch.from_numpy(vec).float(), level=level)
