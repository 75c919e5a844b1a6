"""End-to-end trainer: encoder, RVQ (EMA codebooks, straight-through), decoder,
optional discriminator, Adam."""
from dataclasses import asdict, dataclass, fields
import logging
import time

import numpy as np

from ..bundle import Codec
from ..errors import ConfigError, EmptyDataset, FormatError, NonFiniteLoss, ShapeError
from ..model import CodecConfig, Normalizer, build_codec, build_discriminator
from ..nn import serialize
from ..rvq import CodebookEMA, CodebookStack, cascade, commitment_loss, commitment_loss_grad, train_codebooks
from .evaluate import evaluate_all
from .losses import LossWeights, bce_with_logits, reconstruction_loss
from .optim import Adam

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "tscodec-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    disc_lr: float = 1e-4
    seed: int = 0
    alpha: float = 0.5
    eta: float = 1.0
    gamma: float = 0.01
    huber_delta: float = 1.0
    ema_decay: float = 0.99
    kmeans_iters: int = 10
    # windows encoded for the k-means++ codebook initialisation
    init_windows: int = 2048
    threads: int = 1

    @property
    def weights(self):
        return LossWeights(self.alpha, self.eta, self.gamma, self.huber_delta).validate()

    def validate(self):
        self.weights
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.disc_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        return self


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    pos: int = 0
    perm: np.ndarray = None
    best_val: float = float("inf")


class Trainer:
    def __init__(self, cfg, tcfg, train_windows, stack=None, normalizer=None):
        self.cfg = cfg.validate()
        self.tcfg = tcfg.validate()
        train_windows = np.asarray(train_windows, dtype=np.float64)
        if len(train_windows) == 0:
            raise EmptyDataset("training set is empty")
        if train_windows.shape[1:] != (cfg.c_in, cfg.t_in):
            raise ShapeError(f"training windows {train_windows.shape[1:]} != ({cfg.c_in}, {cfg.t_in})")
        self.normalizer = normalizer or Normalizer.fit(train_windows)
        self.data = self.normalizer.apply(train_windows)
        self.enc, self.dec = build_codec(cfg, tcfg.seed)
        self.disc = build_discriminator(cfg, tcfg.seed + 1)
        self.opt_g = Adam(tcfg.lr)
        self.opt_d = Adam(tcfg.disc_lr, beta1=0.5)
        self.rng = np.random.default_rng(tcfg.seed)
        self.state = TrainState()
        self.stack = stack if stack is not None else self._init_codebooks()
        self.ema = CodebookEMA.start(self.stack, tcfg.ema_decay)

    # -- setup ------------------------------------------------------------

    def _init_codebooks(self):
        take = self.data[:self.tcfg.init_windows]
        z = np.concatenate([self.enc.forward(take[i:i + 64]) for i in range(0, len(take), 64)])
        return train_codebooks(z, self.cfg.n_quantizers, self.cfg.codebook_size,
                               seed=self.tcfg.seed, iters=self.tcfg.kmeans_iters)

    def generator_params(self):
        yield from self.enc.named_parameters("enc.")
        yield from self.dec.named_parameters("dec.")

    def codec(self):
        return Codec(self.cfg, self.enc, self.dec, self.stack, self.normalizer)

    # -- one step ---------------------------------------------------------

    def generator_pass(self, xb, n_active):
        """Forward + backward of the composite loss; leaves grads on enc/dec.

        Returns a dict of loss terms plus the batch's cascade data (all
        stages) for the codebook update.
        """
        w = self.tcfg.weights
        self.enc.zero_grad()
        self.dec.zero_grad()
        z = self.enc.forward(xb)
        n, c, dim = z.shape
        flat = z.reshape(-1, dim)
        idx, partial, inputs = cascade(flat, self.stack, self.cfg.n_quantizers, self.tcfg.threads)
        zq = partial[n_active - 1].reshape(z.shape)
        # straight-through: the decoder sees zq, its gradient flows to z as is
        xh = self.dec.forward(zq)
        rec, g_xh = reconstruction_loss(xb, xh, w)
        adv = 0.0
        if w.gamma > 0:
            logits = self.disc.forward(xh)
            adv, g_logits = bce_with_logits(logits, np.ones_like(logits))
            g_xh = g_xh + w.gamma * self.disc.backward(g_logits)
        g_z = self.dec.backward(g_xh)
        commit = commitment_loss(z, zq)
        if w.eta > 0:
            g_z = g_z + w.eta * commitment_loss_grad(z, zq)
        self.enc.backward(g_z)
        total = rec + w.eta * commit + w.gamma * adv
        return {
            "loss": total, "rec": rec, "commit": commit, "adv": adv, "n_active": n_active,
            "x_hat": xh, "indices": idx, "stage_inputs": inputs,
        }

    def discriminator_step(self, xb, xh):
        self.disc.zero_grad()
        g_real = self.disc.forward(xb)
        l_real, grad = bce_with_logits(g_real, np.ones_like(g_real))
        self.disc.backward(grad)
        g_fake = self.disc.forward(xh)
        l_fake, grad = bce_with_logits(g_fake, np.zeros_like(g_fake))
        self.disc.backward(grad)
        self.opt_d.step(self.disc.named_parameters("disc."))
        return l_real + l_fake

    def train_step(self, xb):
        n_active = int(self.rng.integers(1, self.cfg.n_quantizers + 1))
        out = self.generator_pass(xb, n_active)
        if not np.isfinite(out["loss"]):
            raise NonFiniteLoss(f"non-finite loss at step {self.state.step} "
                                f"(rec={out['rec']}, commit={out['commit']}, adv={out['adv']})")
        self.opt_g.step(self.generator_params())
        self.ema.update(self.stack, out["stage_inputs"], out["indices"])
        d_loss = 0.0
        if self.tcfg.weights.gamma > 0:
            d_loss = self.discriminator_step(xb, out["x_hat"])
        self.state.step += 1
        return {k: out[k] for k in ("loss", "rec", "commit", "adv", "n_active")} | {"disc": d_loss}

    def step(self):
        """Draw the next batch (reshuffling per epoch) and take one step."""
        st = self.state
        if st.perm is None:
            st.perm = self.rng.permutation(len(self.data))
            st.pos = 0
        batch = st.perm[st.pos:st.pos + self.tcfg.batch_size]
        st.pos += len(batch)
        metrics = self.train_step(self.data[batch])
        metrics["epoch_done"] = st.pos >= len(st.perm)
        if metrics["epoch_done"]:
            metrics["reseeded"] = self.ema.end_epoch(self.stack, self.rng)
            st.epoch += 1
            st.perm = None
        return metrics

    def fit(self, val_windows=None, epochs=None, on_epoch=None, time_budget=None):
        """Train until ``epochs`` complete; ``on_epoch`` receives a metrics record."""
        epochs = self.tcfg.epochs if epochs is None else epochs
        started = time.monotonic()
        sums, count = {}, 0
        while self.state.epoch < epochs:
            m = self.step()
            count += 1
            for key in ("loss", "rec", "commit", "adv", "disc"):
                sums[key] = sums.get(key, 0.0) + m[key]
            if not m["epoch_done"]:
                continue
            record = {"event": "epoch", "epoch": self.state.epoch, "step": self.state.step}
            record.update({k: v / count for k, v in sums.items()})
            record["reseeded"] = m["reseeded"]
            record["utilization"] = [round(float(u), 4) for u in self.stack.utilization()]
            if val_windows is not None:
                errs = evaluate_all(self.codec(), val_windows, self.tcfg.threads)
                record["val_error"] = {str(n): round(e, 4) for n, e in errs.items()}
                self.state.best_val = min(self.state.best_val, errs[self.cfg.n_quantizers])
            record["elapsed_s"] = round(time.monotonic() - started, 1)
            log.info("epoch %d: %s", self.state.epoch, record)
            if on_epoch:
                on_epoch(record)
            sums, count = {}, 0
            if time_budget is not None and time.monotonic() - started > time_budget:
                break
        return self

    # -- checkpoints ------------------------------------------------------

    def checkpoint_bytes(self):
        tensors = {}
        for prefix, mod in (("enc", self.enc), ("dec", self.dec), ("disc", self.disc)):
            tensors.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
        tensors.update(self.opt_g.state_arrays("opt_g"))
        tensors.update(self.opt_d.state_arrays("opt_d"))
        tensors["codebooks.entries"] = self.stack.entries
        tensors["codebooks.usage"] = self.stack.usage
        tensors["ema.cluster_size"] = self.ema.cluster_size
        tensors["ema.embed_sum"] = self.ema.embed_sum
        tensors["ema.epoch_usage"] = self.ema.epoch_usage
        tensors["ema.reservoir"] = self.ema.reservoir
        tensors["norm.mean"] = self.normalizer.mean
        tensors["norm.std"] = self.normalizer.std
        if self.state.perm is not None:
            tensors["state.perm"] = self.state.perm.astype(np.int64)
        st = self.state
        meta = {
            "kind": CHECKPOINT_KIND,
            "checkpoint_version": CHECKPOINT_VERSION,
            "codec": self.cfg.to_dict(),
            "train": asdict(self.tcfg),
            "state": {"epoch": st.epoch, "step": st.step, "pos": st.pos,
                      "best_val": None if not np.isfinite(st.best_val) else st.best_val},
            "adam_t": {"g": self.opt_g.t, "d": self.opt_d.t},
            "rng": self.rng.bit_generator.state,
        }
        return serialize.dumps(tensors, "train", meta)

    def save_checkpoint(self, path):
        with open(path, "wb") as fh:
            fh.write(self.checkpoint_bytes())

    @classmethod
    def from_checkpoint_bytes(cls, data, train_windows):
        tensors, meta, precision = serialize.loads(data)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise FormatError("not a training checkpoint")
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version {meta.get('checkpoint_version')} unsupported", code="E_VERSION")
        if precision != "train":
            raise FormatError("checkpoints must be stored at train precision")
        cfg = CodecConfig.from_dict(meta["codec"])
        known = {f.name for f in fields(TrainConfig)}
        tcfg = TrainConfig(**{k: v for k, v in meta["train"].items() if k in known})
        stack = CodebookStack(np.array(tensors["codebooks.entries"]), np.array(tensors["codebooks.usage"]))
        norm = Normalizer(np.array(tensors["norm.mean"]), np.array(tensors["norm.std"]))
        self = cls(cfg, tcfg, train_windows, stack=stack, normalizer=norm)
        for prefix, mod in (("enc", self.enc), ("dec", self.dec), ("disc", self.disc)):
            mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})
        self.opt_g.load_state_arrays(tensors, "opt_g", meta["adam_t"]["g"])
        self.opt_d.load_state_arrays(tensors, "opt_d", meta["adam_t"]["d"])
        self.ema.cluster_size = np.array(tensors["ema.cluster_size"])
        self.ema.embed_sum = np.array(tensors["ema.embed_sum"])
        self.ema.epoch_usage = np.array(tensors["ema.epoch_usage"])
        self.ema.reservoir = np.array(tensors["ema.reservoir"])
        st = meta["state"]
        self.state = TrainState(st["epoch"], st["step"], st["pos"],
                                np.array(tensors["state.perm"]) if "state.perm" in tensors else None,
                                float("inf") if st["best_val"] is None else st["best_val"])
        self.rng.bit_generator.state = meta["rng"]
        return self

    @classmethod
    def load_checkpoint(cls, path, train_windows):
        with open(path, "rb") as fh:
            return cls.from_checkpoint_bytes(fh.read(), train_windows)
