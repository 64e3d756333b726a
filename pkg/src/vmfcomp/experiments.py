"""Desk-scale leave-one-domain-out runs shared by the acceptance suite and demos."""

import logging
import time

from .data import generate_benchmark, make_split
from .eval import evaluate
from .networks import ArchitectureConfig
from .trainers import TrainConfig, Trainer, pretrain_autoencoder

log = logging.getLogger(__name__)

# narrower than the default widths so a 2k-iteration run takes ~2 minutes on one CPU core
DESK_ARCH = dict(unet_widths=(8, 16, 32), feature_channels=32, head_width=16,
                 classifier_channels=(8, 16, 16, 16, 16))


def desk_config(setting, seed=0, iterations=2000, lr=1e-3, **kw):
    kw.setdefault("pretrain_epochs", 5)
    kw.setdefault("pretrain_lr", 1e-3)
    return TrainConfig(setting=setting, seed=seed, iterations=iterations, lr=lr,
                       arch=ArchitectureConfig(**DESK_ARCH), **kw)


class OrderingRun:
    """Train settings for one (target, seed) pair and score them on the target.

    The encoder pre-training on source images is computed once and shared by
    every vMF setting; the baseline never sees it.
    """

    def __init__(self, domains, target, seed, label_fraction=0.05, **cfg_kw):
        self.domains = domains
        self.split = make_split(domains, target, label_fraction, seed)
        self.seed = seed
        self.cfg_kw = cfg_kw
        self._pretrained = None
        self.models = {}
        self.timings = {}

    def config(self, setting):
        return desk_config(setting, seed=self.seed, **self.cfg_kw)

    def pretrained(self):
        if self._pretrained is None:
            t0 = time.time()
            images = self.split.training_samples(self.domains)
            self._pretrained = pretrain_autoencoder(images, self.config("vmfnet"))
            self.timings["pretrain"] = time.time() - t0
        return self._pretrained

    def train(self, setting):
        if setting in self.models:
            return self.models[setting]
        cfg = self.config(setting)
        t0 = time.time()
        if setting == "baseline":
            tr = Trainer(cfg, self.split.labeled_samples(self.domains))
        else:
            tr = Trainer(cfg, self.split.training_samples(self.domains),
                         pretrained=self.pretrained())
        tr.run()
        self.timings[setting] = time.time() - t0
        self.models[setting] = tr.model.eval()
        log.info("%s target %s seed %d: %.0f s", setting, self.split.target_domain, self.seed,
                 self.timings[setting])
        return self.models[setting]

    def target_dice(self, setting):
        model = self.train(setting)
        target = {self.split.target_domain: self.split.target_samples(self.domains)}
        return evaluate(model, target, probes=False).mean_dice()


def benchmark(seed=0):
    return generate_benchmark(n=200, seed=seed)
