"""vMF kernel bank: decomposition of features into kernel activations and back.

Tensors are channel-first and batched: features ``(N, D, H, W)``, activations
``(N, J, H, W)``, kernel means ``(J, D)``.
"""

import math

import torch
import torch.nn as nn

from .errors import DegenerateActivation, DimensionMismatch, ZeroFeatureVector, ZeroKernel

EPS_NORM = 1e-8


class VMFKernelBank(nn.Module):
    """J learnable unit-norm mean directions sharing one fixed concentration.

    The normalising constant defaults to ``C(sigma) = exp(sigma)`` so that a
    perfectly aligned feature activates its kernel with value exactly 1.
    """

    def __init__(self, num_kernels, dim, sigma=30.0, log_norm_const=None, seed=None,
                 dtype=torch.float32):
        super().__init__()
        if num_kernels < 1:
            raise ValueError("num_kernels must be >= 1")
        if dim < 2:
            raise ValueError("dim must be >= 2")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        gen = torch.Generator().manual_seed(int(seed)) if seed is not None else None
        mus = torch.randn(num_kernels, dim, generator=gen, dtype=dtype)
        self.mus = nn.Parameter(mus / mus.norm(dim=1, keepdim=True))
        self.sigma = float(sigma)
        self.log_norm_const = float(sigma if log_norm_const is None else log_norm_const)

    @property
    def num_kernels(self):
        return self.mus.shape[0]

    @property
    def dim(self):
        return self.mus.shape[1]

    @property
    def norm_const(self):
        return math.exp(self.log_norm_const)

    @classmethod
    def from_means(cls, mus, sigma=30.0, log_norm_const=None):
        mus = torch.as_tensor(mus)
        bank = cls(mus.shape[0], mus.shape[1], sigma=sigma, log_norm_const=log_norm_const,
                   dtype=mus.dtype)
        with torch.no_grad():
            bank.mus.copy_(mus)
        return bank

    def init_from_features(self, features, seed=0):
        """Seed the kernels with k-means++ picks among unit feature vectors.

        ``features`` is ``(M, D)`` and must already be unit-norm.
        """
        feats = torch.as_tensor(features, dtype=self.mus.dtype)
        picks = kmeanspp_sphere(feats, self.num_kernels, seed=seed)
        with torch.no_grad():
            self.mus.copy_(feats[picks])
        project_kernels(self)
        return self

    def max_norm_error(self):
        with torch.no_grad():
            return float((self.mus.norm(dim=1) - 1.0).abs().max())

    def forward(self, features):
        return vmf_activations(features, self)


def kmeanspp_sphere(points, k, seed=0, trials=None):
    """Indices of ``k`` seeds chosen by greedy k-means++ with cosine distance.

    Each step draws ``trials`` candidates (default ``2 + floor(ln k)``) in
    proportion to their distance from the current seeds and keeps the one that
    lowers the total distance most, which rarely puts two seeds in one cluster.
    """
    gen = torch.Generator().manual_seed(int(seed))
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    trials = trials or 2 + int(math.log(k))
    first = int(torch.randint(n, (1,), generator=gen))
    picks = [first]
    dist = (1.0 - points @ points[first]).clamp_min(0)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in picks]
            nxt = remaining[int(torch.randint(len(remaining), (1,), generator=gen))]
            new_dist = torch.minimum(dist, (1.0 - points @ points[nxt]).clamp_min(0))
        else:
            cands = torch.multinomial(dist / total, trials, replacement=True, generator=gen)
            cand_dist = torch.minimum(dist[None], (1.0 - points[cands] @ points.T).clamp_min(0))
            best = int(cand_dist.sum(dim=1).argmin())
            nxt, new_dist = int(cands[best]), cand_dist[best]
        picks.append(nxt)
        dist = new_dist
    return picks


def normalize_features(z):
    """Scale every spatial feature vector to unit L2 norm (channel axis 1)."""
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms <= EPS_NORM).any()):
        bad = (norms <= EPS_NORM).nonzero()[0].tolist()
        raise ZeroFeatureVector(f"feature vector with norm <= {EPS_NORM} at index {bad}")
    return z / norms


def _check_dims(z, bank):
    if z.shape[1] != bank.mus.shape[1]:
        raise DimensionMismatch(
            f"features have {z.shape[1]} channels but kernels have dimension {bank.mus.shape[1]}")


def vmf_activations(zn, bank):
    """exp(sigma * mu_j . z_i) / C(sigma), evaluated in log space."""
    _check_dims(zn, bank)
    cos = torch.einsum("jd,ndhw->njhw", bank.mus, zn)
    return torch.exp(bank.sigma * cos - bank.log_norm_const)


def kernel_similarity(zn, bank):
    _check_dims(zn, bank)
    return torch.einsum("jd,ndhw->njhw", bank.mus, zn)


def clustering_loss(bank, zn):
    """Negative mean over positions (and batch) of the best kernel similarity."""
    sim = kernel_similarity(zn, bank)
    return -sim.max(dim=1).values.mean()


def recompose(activations, bank):
    """Rebuild features as kernel combinations weighted by L2-normalised activations."""
    if activations.shape[1] != bank.mus.shape[0]:
        raise DimensionMismatch(
            f"activations have {activations.shape[1]} channels but bank has {bank.mus.shape[0]} kernels")
    # exp(-2 sigma) underflows any epsilon guard, so rescale by the max before normalising
    amax = activations.amax(dim=1, keepdim=True)
    if bool((amax <= 0).any()):
        raise DegenerateActivation("all-zero activation vector")
    scaled = activations / amax
    coeff = scaled / scaled.norm(dim=1, keepdim=True)
    return torch.einsum("njhw,jd->ndhw", coeff, bank.mus)


def project_kernel_grads(bank):
    """Drop the radial part of each kernel gradient, in place.

    Only tangent directions move a unit vector. Adaptive optimisers rescale
    coordinates separately, so a radial gradient left in place turns into a
    spurious tangent step that re-projection cannot undo.
    """
    g = bank.mus.grad
    if g is not None:
        with torch.no_grad():
            mus = bank.mus / bank.mus.norm(dim=1, keepdim=True)
            g.sub_((g * mus).sum(dim=1, keepdim=True) * mus)
    return bank


def fit_kernels(bank, zn, steps=2000, lr=1e-2):
    """Optimise only the kernels on fixed unit features with the clustering loss."""
    opt = torch.optim.Adam([bank.mus], lr=lr)
    for _ in range(steps):
        loss = clustering_loss(bank, zn)
        opt.zero_grad()
        loss.backward()
        project_kernel_grads(bank)
        opt.step()
        project_kernels(bank)
    return bank


def project_kernels(bank):
    """Re-project every kernel onto the unit sphere, in place."""
    with torch.no_grad():
        norms = bank.mus.norm(dim=1, keepdim=True)
        if bool((norms <= EPS_NORM).any()):
            raise ZeroKernel(f"kernel with norm <= {EPS_NORM}")
        bank.mus.div_(norms)
    return bank
