"""Training settings, objectives, the optimisation loop and checkpoints.

Settings:

``unsup``      clustering loss only, kernels trained on frozen encoder features
``weak``       heart-presence classifier on vMF activations + clustering
``vmfnet``     Dice (labeled only) + reconstruction + clustering
``vmfpseudo``  two vMF segmenters with cross pseudo supervision
``vmfweak``    Dice + weak LV/MYO/RV presence on the segmentation + clustering
``baseline``   Dice only on labeled data, encoder features fed straight to the
               segmentation head (no vMF bottleneck); a reference point for
               the semi-supervised settings
"""

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .errors import (CorruptFile, EmptyDataset, IncompatibleCheckpoint, NonFiniteLoss,
                     SettingMismatch)
from .networks import (ArchitectureConfig, Encoder, Reconstructor, SegmentationHead,
                       UNetAutoencoder, WeakClassifier)
from .vmf_core import (VMFKernelBank, clustering_loss, normalize_features, project_kernel_grads,
                       project_kernels, recompose, vmf_activations)

log = logging.getLogger(__name__)

SETTINGS = ("unsup", "weak", "vmfnet", "vmfpseudo", "vmfweak", "baseline")
USES_MASKS = ("vmfnet", "vmfpseudo", "vmfweak", "baseline")
NEEDS_WEAK = ("weak", "vmfweak")

CKPT_MAGIC = b"VMFCCKP1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    setting: str = "vmfnet"
    lr: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    labeled_per_batch: int = 2
    sigma: float = 30.0
    lambda_cps: float = 0.1
    lambda_weak: float = 0.5
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-4
    seed: int = 0
    kernel_init: str = "features"
    twin_perturb_std: float = 0.01
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchitectureConfig.from_dict(self.arch)
        if self.setting not in SETTINGS:
            raise SettingMismatch(f"unknown setting {self.setting!r}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.lambda_cps, self.lambda_weak) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch_size < 1 or not 0 <= self.labeled_per_batch <= self.batch_size:
            raise ValueError("need 0 <= labeled_per_batch <= batch_size, batch_size >= 1")
        if self.kernel_init not in ("features", "normal"):
            raise ValueError(f"unknown kernel_init {self.kernel_init!r}")

    @property
    def J(self):
        return self.arch.num_kernels

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- models ------------------------------------------------------------------

class VMFModel(nn.Module):
    """Encoder + kernel bank, plus whichever heads the setting needs."""

    def __init__(self, arch, setting, sigma=30.0, seed=0):
        super().__init__()
        self.arch = arch
        self.setting = setting
        torch.manual_seed(seed)
        self.encoder = Encoder(arch)
        self.bank = None
        if setting != "baseline":
            self.bank = VMFKernelBank(arch.num_kernels, arch.feature_channels, sigma=sigma,
                                      seed=seed)
        self.seg_head = None
        if setting in ("vmfnet", "vmfpseudo", "vmfweak"):
            self.seg_head = SegmentationHead(arch)
        elif setting == "baseline":
            self.seg_head = SegmentationHead(arch, in_channels=arch.feature_channels)
        self.reconstructor = Reconstructor(arch) if setting == "vmfnet" else None
        self.classifier = None
        if setting == "weak":
            self.classifier = WeakClassifier(arch.num_kernels, arch.feature_size, 1, arch)
        elif setting == "vmfweak":
            self.classifier = WeakClassifier(arch.num_classes, arch.input_size, 3, arch)

    def forward(self, x, frozen_features=False):
        out = {}
        if frozen_features:
            with torch.no_grad():
                z = self.encoder(x)
        else:
            z = self.encoder(x)
        out["z"] = z
        if self.bank is None:
            out["pred"] = self.seg_head(z)
            return out
        zn = normalize_features(z)
        act = vmf_activations(zn, self.bank)
        out["zn"], out["act"] = zn, act
        if self.seg_head is not None:
            out["pred"] = self.seg_head(act)
        if self.reconstructor is not None:
            out["recon"] = self.reconstructor(recompose(act, self.bank))
        if self.classifier is not None:
            out["c_hat"] = self.classifier(out["pred"] if self.setting == "vmfweak" else act)
        return out

    @torch.no_grad()
    def predict(self, x):
        """Segmentation probabilities in inference mode."""
        was = self.training
        self.eval()
        pred = self.forward(x)["pred"]
        self.train(was)
        return pred

    @torch.no_grad()
    def activations(self, x):
        was = self.training
        self.eval()
        out = self.forward(x)
        self.train(was)
        return out["act"]

    def banks(self):
        return [self.bank] if self.bank is not None else []


class TwinModel(nn.Module):
    """Two vMF segmenters trained together with cross pseudo supervision."""

    setting = "vmfpseudo"

    def __init__(self, a, b):
        super().__init__()
        self.a = a
        self.b = b
        self.arch = a.arch

    def predict(self, x):
        return self.a.predict(x)

    def activations(self, x):
        return self.a.activations(x)

    def banks(self):
        return [self.a.bank, self.b.bank]


def build_model(cfg, seed=None, pretrained=None):
    """Fresh model for ``cfg.setting``; ``pretrained`` is an encoder state dict."""
    seed = cfg.seed if seed is None else seed
    if cfg.setting == "vmfpseudo":
        a = VMFModel(cfg.arch, "vmfpseudo", cfg.sigma, seed)
        b = VMFModel(cfg.arch, "vmfpseudo", cfg.sigma, seed + 1)
        if pretrained is not None:
            a.encoder.load_state_dict(pretrained)
            b.encoder.load_state_dict(pretrained)
            perturb_parameters(b.encoder, cfg.twin_perturb_std, seed + 1)
        return TwinModel(a, b)
    model = VMFModel(cfg.arch, cfg.setting, cfg.sigma, seed)
    if pretrained is not None:
        model.encoder.load_state_dict(pretrained)
    return model


def perturb_parameters(module, rel_std, seed):
    """Add seeded Gaussian noise scaled by each tensor's own std."""
    if rel_std <= 0:
        return
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for p in module.parameters():
            scale = float(p.std()) if p.numel() > 1 else float(p.abs().mean())
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * rel_std * scale)


def submodels(model):
    return [model.a, model.b] if isinstance(model, TwinModel) else [model]


# -- batches -----------------------------------------------------------------

def make_batch(samples, num_classes=3, dtype=torch.float32):
    """Stack samples into tensors; absent labels become zeros with a flag."""
    if not samples:
        raise EmptyDataset("empty batch")
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).to(dtype)
    n = len(samples)
    h, w = samples[0].image.shape
    masks = torch.zeros(n, num_classes, h, w, dtype=dtype)
    has_mask = torch.zeros(n, dtype=torch.bool)
    weak = torch.zeros(n, 3, dtype=dtype)
    has_weak = torch.zeros(n, dtype=torch.bool)
    for i, s in enumerate(samples):
        if s.mask is not None:
            masks[i] = losses.labels_to_onehot(torch.from_numpy(s.mask.astype(np.int64))[None],
                                               num_classes)[0].to(dtype)
            has_mask[i] = True
        if s.weak is not None:
            weak[i] = torch.from_numpy(s.weak.astype(np.float64)).to(dtype)
            has_weak[i] = True
    return {"x": x, "masks": masks, "has_mask": has_mask, "weak": weak, "has_weak": has_weak}


def gated_dice(pred, batch):
    """Dice averaged over the samples that carry a mask; exactly 0 when none do."""
    lam = batch["has_mask"].to(pred.dtype)
    per = losses.dice_loss_per_sample(pred, batch["masks"].to(pred.dtype))
    return (lam * per).sum() / lam.sum().clamp_min(1.0)


def heart_presence(weak):
    return weak.amax(dim=1, keepdim=True)


# -- objectives --------------------------------------------------------------

def objective(setting, batch, model, cfg):
    """Total loss and a ``{term: tensor}`` breakdown for one batch."""
    if setting != model.setting:
        raise SettingMismatch(f"model built for {model.setting!r}, objective asked for {setting!r}")
    if setting in NEEDS_WEAK and not bool(batch["has_weak"].all()):
        raise SettingMismatch(f"{setting} needs a weak label on every sample")
    x = batch["x"]
    terms = {}
    if setting == "vmfpseudo":
        return twin_objective(model, batch, cfg)
    if setting == "unsup":
        out = model(x, frozen_features=True)
        terms["clu"] = clustering_loss(model.bank, out["zn"])
        total = terms["clu"]
    elif setting == "weak":
        out = model(x)
        terms["weak"] = losses.weak_loss(out["c_hat"], heart_presence(batch["weak"]))
        terms["clu"] = clustering_loss(model.bank, out["zn"])
        total = terms["weak"] + terms["clu"]
    elif setting == "vmfnet":
        out = model(x)
        terms["dice"] = gated_dice(out["pred"], batch)
        terms["rec"] = losses.reconstruction_loss(x, out["recon"])
        terms["clu"] = clustering_loss(model.bank, out["zn"])
        total = terms["dice"] + terms["rec"] + terms["clu"]
    elif setting == "vmfweak":
        out = model(x)
        terms["dice"] = gated_dice(out["pred"], batch)
        terms["weak"] = losses.weak_loss(out["c_hat"], batch["weak"])
        terms["clu"] = clustering_loss(model.bank, out["zn"])
        total = terms["dice"] + cfg.lambda_weak * terms["weak"] + terms["clu"]
    elif setting == "baseline":
        out = model(x)
        terms["dice"] = gated_dice(out["pred"], batch)
        total = terms["dice"]
    else:
        raise SettingMismatch(f"unknown setting {setting!r}")
    terms["total"] = total
    return total, terms


def twin_step(model_a, model_b, batch, cfg, optimizer=None):
    """Per-twin losses; each twin is pseudo-labelled by the other's detached output.

    With an ``optimizer`` over both twins, both are updated in this call.
    """
    x = batch["x"]
    out_a, out_b = model_a(x), model_b(x)
    pa, pb = out_a["pred"], out_b["pred"]
    terms = {
        "dice_a": gated_dice(pa, batch),
        "clu_a": clustering_loss(model_a.bank, out_a["zn"]),
        "cps_a": losses.cps_loss(pb.detach(), pa),
        "dice_b": gated_dice(pb, batch),
        "clu_b": clustering_loss(model_b.bank, out_b["zn"]),
        "cps_b": losses.cps_loss(pa.detach(), pb),
    }
    loss_a = terms["dice_a"] + terms["clu_a"] + cfg.lambda_cps * terms["cps_a"]
    loss_b = terms["dice_b"] + terms["clu_b"] + cfg.lambda_cps * terms["cps_b"]
    terms["loss_a"], terms["loss_b"] = loss_a, loss_b
    terms["total"] = loss_a + loss_b
    if optimizer is not None:
        optimizer.zero_grad()
        terms["total"].backward()
        for m in (model_a, model_b):
            project_kernel_grads(m.bank)
        optimizer.step()
        for m in (model_a, model_b):
            project_kernels(m.bank)
    return terms


def twin_objective(model, batch, cfg):
    terms = twin_step(model.a, model.b, batch, cfg)
    return terms["total"], terms


# -- pre-training ------------------------------------------------------------

def pretrain_autoencoder(images, cfg, seed=None, epochs=None, return_history=False):
    """Train the full U-Net to reconstruct ``images`` and return the encoder weights.

    ``images`` is an ``(N, H, W)`` array (or list of samples).
    """
    if len(images) == 0:
        raise EmptyDataset("no images to pre-train on")
    if hasattr(images[0], "image"):
        images = np.stack([s.image for s in images])
    x_all = torch.from_numpy(np.asarray(images, dtype=np.float32))[:, None]
    seed = cfg.seed if seed is None else seed
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    torch.manual_seed(seed)
    net = UNetAutoencoder(cfg.arch)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.pretrain_lr)
    history = []
    n = len(x_all)
    bs = min(cfg.batch_size, n)
    # cosine decay to zero: a constant Adam step leaves an L1 fit jittering at ~lr
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs * (n // bs)))
    net.train()
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch, 101]).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            xb = x_all[perm[start:start + bs]]
            loss = losses.reconstruction_loss(xb, net(xb))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(xb)
            count += len(xb)
        history.append(total / count)
    state = copy.deepcopy(net.encoder.state_dict())
    return (state, history) if return_history else state


@torch.no_grad()
def init_kernels_from_data(model, images, seed, max_images=32, max_points=4096):
    """k-means++ seeding of every bank from unit encoder features of ``images``."""
    x = torch.from_numpy(np.stack([s.image for s in images[:max_images]])[:, None])
    for k, m in enumerate(submodels(model)):
        if m.bank is None:
            continue
        was = m.training
        m.eval()
        zn = normalize_features(m.encoder(x.to(m.bank.mus.dtype)))
        m.train(was)
        feats = zn.permute(0, 2, 3, 1).reshape(-1, zn.shape[1])
        rng = np.random.default_rng([seed, k, 303])
        if len(feats) > max_points:
            feats = feats[torch.from_numpy(rng.choice(len(feats), max_points, replace=False))]
        m.bank.init_from_features(feats, seed=seed + k)


# -- training loop -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    iteration: int
    model_state: dict
    optimizer_state: dict = None
    extra: dict = field(default_factory=dict)

    def build_model(self):
        model = build_model(self.config)
        model.load_state_dict(self.model_state)
        return model


class Trainer:
    """Stateful optimisation loop over a fixed training set."""

    def __init__(self, cfg, samples, pretrained=None, checkpoint=None):
        if not samples:
            raise EmptyDataset("no training samples")
        self.cfg = cfg
        self.samples = samples
        self.labeled = [i for i, s in enumerate(samples) if s.mask is not None]
        self.unlabeled = [i for i, s in enumerate(samples) if s.mask is None]
        if cfg.setting == "baseline":
            if not self.labeled:
                raise EmptyDataset("baseline needs labeled samples")
            self.unlabeled = []
        self.log_rows = []
        if checkpoint is not None:
            self.model = checkpoint.build_model()
            self.optimizer = self._make_optimizer()
            if checkpoint.optimizer_state is not None:
                self.optimizer.load_state_dict(checkpoint.optimizer_state)
            self.iteration = checkpoint.iteration
            self.pretrain_history = checkpoint.extra.get("pretrain_history", [])
            return
        self.pretrain_history = []
        if pretrained is None and cfg.pretrain_epochs > 0 and cfg.setting != "baseline":
            pretrained, self.pretrain_history = pretrain_autoencoder(
                samples, cfg, return_history=True)
        self.model = build_model(cfg, pretrained=pretrained)
        if cfg.kernel_init == "features" and cfg.setting != "baseline":
            init_kernels_from_data(self.model, samples, cfg.seed)
        self.optimizer = self._make_optimizer()
        self.iteration = 0

    def _make_optimizer(self):
        if self.cfg.setting == "unsup":
            params = [b.mus for b in self.model.banks()]
        else:
            params = list(self.model.parameters())
        return torch.optim.Adam(params, lr=self.cfg.lr)

    def batch_indices(self, iteration):
        """Sample ids of one batch; a pure function of (seed, iteration)."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, iteration, 202])
        bs = cfg.batch_size
        if cfg.setting not in USES_MASKS:
            return [int(i) for i in rng.choice(len(self.samples), bs, replace=len(self.samples) < bs)]
        n_lab = bs if not self.unlabeled else (cfg.labeled_per_batch if self.labeled else 0)
        picks = []
        if n_lab:
            picks += rng.choice(self.labeled, n_lab, replace=len(self.labeled) < n_lab).tolist()
        if bs - n_lab:
            picks += rng.choice(self.unlabeled, bs - n_lab,
                                replace=len(self.unlabeled) < bs - n_lab).tolist()
        return [int(i) for i in picks]

    def step(self):
        idx = self.batch_indices(self.iteration)
        batch = make_batch([self.samples[i] for i in idx], self.cfg.arch.num_classes)
        self.model.train()
        if self.cfg.setting == "unsup":
            for m in submodels(self.model):
                m.encoder.eval()
        loss, terms = objective(self.cfg.setting, batch, self.model, self.cfg)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"non-finite loss at iteration {self.iteration}, batch {idx}",
                batch_id=idx, iteration=self.iteration,
                terms={k: v.item() for k, v in terms.items()})
        self.optimizer.zero_grad()
        loss.backward()
        for bank in self.model.banks():
            project_kernel_grads(bank)
        self.optimizer.step()
        for bank in self.model.banks():
            project_kernels(bank)
        self.iteration += 1
        row = {k: float(v.detach()) for k, v in terms.items()}
        if self.model.banks():
            row["kernel_norm_err"] = max(b.max_norm_error() for b in self.model.banks())
        for k, v in row.items():
            self.log_rows.append((self.iteration, k, v))
        return row

    def run(self, iterations=None, callback=None):
        target = self.cfg.iterations if iterations is None else iterations
        while self.iteration < target:
            row = self.step()
            if callback is not None:
                callback(self.iteration, row)
        return self

    def checkpoint(self):
        return Checkpoint(
            config=self.cfg,
            iteration=self.iteration,
            model_state=copy.deepcopy(self.model.state_dict()),
            optimizer_state=copy.deepcopy(self.optimizer.state_dict()),
            extra={"pretrain_history": list(self.pretrain_history)},
        )


def train(cfg, samples, pretrained=None, resume=None, callback=None):
    """Run ``cfg.iterations`` steps (or resume to them); returns (checkpoint, log rows)."""
    trainer = Trainer(cfg, samples, pretrained=pretrained, checkpoint=resume)
    trainer.run(callback=callback)
    return trainer.checkpoint(), trainer.log_rows


def write_loss_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "term", "value"])
        for it, term, value in rows:
            w.writerow([it, term, repr(float(value))])


def read_loss_log(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        return [(int(a), b, float(c)) for a, b, c in r]


# -- checkpoint files --------------------------------------------------------

def _flatten_optimizer(state):
    tensors = {}
    meta = {"param_groups": state["param_groups"], "state": {}}
    for pid, st in state["state"].items():
        keys = {}
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"optim/{pid}/{k}"] = v
                keys[k] = "tensor"
            else:
                keys[k] = v
        meta["state"][str(pid)] = keys
    return tensors, meta


def save_checkpoint(ckpt, path):
    """JSON manifest + little-endian float32 payloads in one file."""
    tensors = {"model/" + k: v for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optimizer_state is not None:
        ot, optim_meta = _flatten_optimizer(ckpt.optimizer_state)
        tensors.update(ot)
    index = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                      "offset": offset, "nbytes": arr.nbytes})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "version": CKPT_VERSION,
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "optimizer": optim_meta,
        "extra": ckpt.extra,
        "tensors": index,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for p in payloads:
            f.write(p)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CorruptFile(f"{path}: not a checkpoint")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + mlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != CKPT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported version {manifest.get('version')}")
    base = 16 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise CorruptFile(f"{path}: payload {e['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        t = torch.from_numpy(arr.astype(np.float32)).reshape(e["shape"])
        tensors[e["name"]] = t.to(getattr(torch, e["dtype"]))
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim_state = None
    om = manifest.get("optimizer")
    if om is not None:
        state = {}
        for pid, keys in om["state"].items():
            state[int(pid)] = {k: (tensors[f"optim/{pid}/{k}"] if v == "tensor" else v)
                               for k, v in keys.items()}
        optim_state = {"state": state, "param_groups": om["param_groups"]}
    cfg = TrainConfig.from_dict(manifest["config"])
    return Checkpoint(cfg, manifest["iteration"], model_state, optim_state, manifest.get("extra", {}))
