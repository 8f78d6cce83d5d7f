"""Four-stage training schedule with alternating freezes and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import pickle
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .dataset import CorpusIndex, enumerate_quadruple_cells
from .errors import (CorruptCheckpoint, DataExhausted, Divergence, InvalidConfig, NoValidPairs,
                     VersionMismatch)
from .network import GROUPS, NetworkConfig, PMRNet, init_parameters
from .topology import kinect_v2

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pmr-checkpoint/1"
STAGE_IDS = ("pretrain_ae", "pretrain_cls", "unpaired", "paired")
CLASSIFIER_GROUPS = ("motion_cls", "privacy_cls", "quality")


@dataclass(frozen=True)
class Stage:
    stage_id: str
    paired: bool
    epochs: int

    def __post_init__(self):
        if self.stage_id not in STAGE_IDS:
            raise InvalidConfig(f"unknown stage {self.stage_id!r}")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")

    def __str__(self):
        return f"{self.stage_id}:{'paired' if self.paired else 'unpaired'}:{self.epochs}"

    @classmethod
    def parse(cls, text):
        sid, mode, epochs = (t.strip() for t in text.split(":"))
        if mode not in ("paired", "unpaired"):
            raise InvalidConfig(f"bad paired flag {mode!r}")
        return cls(sid, mode == "paired", int(epochs))


DEFAULT_PLAN = (
    Stage("pretrain_ae", True, 5),
    Stage("pretrain_ae", False, 20),
    Stage("pretrain_cls", True, 20),
    Stage("pretrain_cls", False, 50),
    Stage("unpaired", False, 100),
    Stage("paired", True, 80),
)

DESK_EPOCHS = (2, 5, 5, 10, 20, 20)


def scaled_plan(epochs, plan=DEFAULT_PLAN):
    return tuple(Stage(s.stage_id, s.paired, int(e)) for s, e in zip(plan, epochs))


def parse_plan(text):
    return tuple(Stage.parse(t) for t in text.split(",") if t.strip())


def format_plan(plan):
    return ", ".join(str(s) for s in plan)


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    lr_autoencoder: float = 1e-3
    lr_classifiers: float = 1e-3
    ae_steps_per_cls_step: int = 1
    grad_clip: float = 0.05  # max grad norm per autoencoder module, 0 disables
    lr_schedule: str = "cosine"  # anneal within each stage, or "constant"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    plan: tuple = DEFAULT_PLAN

    def to_dict(self):
        d = asdict(self)
        d["plan"] = format_plan(self.plan)
        return d


@dataclass
class TrainState:
    net: PMRNet
    optimizers: dict
    actions: list          # corpus action ids, index = class label
    actors: list
    stage_index: int = 0   # position in the plan
    epoch: int = 0         # completed epochs of the current stage
    step: int = 0

    def group_snapshot(self):
        return {g: {k: v.detach().clone() for k, v in self.net.group_state(g).items()} for g in GROUPS}


def stage_lr(base, schedule, epoch, epochs):
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(epochs, 1)))
    raise InvalidConfig(f"unknown lr_schedule {schedule!r}")


def make_optimizers(net, cfg: TrainConfig):
    return {
        g: torch.optim.Adam(net.group_parameters(g),
                            lr=cfg.lr_autoencoder if g == "autoencoder" else cfg.lr_classifiers)
        for g in GROUPS
    }


def new_state(cfg: TrainConfig, actions, actors, net_cfg: NetworkConfig | None = None):
    net_cfg = net_cfg or NetworkConfig(y_action=len(actions), y_actor=len(actors))
    if net_cfg.y_action != len(actions) or net_cfg.y_actor != len(actors):
        raise InvalidConfig("classifier widths must match corpus label counts")
    net = init_parameters(net_cfg, cfg.seed)
    return TrainState(net, make_optimizers(net, cfg), list(actions), list(actors))


class _Batch:
    """Unique sequences of a batch plus (optionally) quadruple row indices into them."""

    def __init__(self, x, action, actor, quads=None, rows=None):
        self.x = x
        self.action = action
        self.actor = actor
        self.quads = quads
        self.rows = rows    # corpus row of each unique sequence


def _set_trainable(modules, flag):
    for m in modules:
        m.train(flag)
        for p in m.parameters():
            p.requires_grad_(flag)


def accuracy(probs, labels):
    return float((probs.argmax(-1) == labels).float().mean())


class Trainer:
    """Owns a TrainState and runs plan stages on a training corpus.

    ``hooks`` objects may define ``before_step(kind, state)`` and
    ``after_step(kind, state)``; kind is "autoencoder" or "classifiers".
    """

    def __init__(self, cfg: TrainConfig, train_index: CorpusIndex, topology=None,
                 eval_index: CorpusIndex | None = None, state: TrainState | None = None,
                 log_path=None, checkpoint_dir=None, hooks=(), net_cfg: NetworkConfig | None = None):
        torch.use_deterministic_algorithms(True)
        self.cfg = cfg
        self.topology = topology or kinect_v2()
        self.index = train_index
        if not len(train_index):
            raise DataExhausted("empty training corpus")
        actions, actors = train_index.actions, train_index.actors
        fresh = state is None
        self.state = state or new_state(cfg, actions, actors, net_cfg)
        self.act_of = {a: i for i, a in enumerate(self.state.actions)}
        self.actor_of = {p: i for i, p in enumerate(self.state.actors)}
        self.x, self.y_action, self.y_actor = self._tensorize(train_index)
        if fresh:
            self.state.net.set_pose_statistics(self.x)
        self._row = {e.source: i for i, e in enumerate(train_index.entries)}
        self._quads = None
        self.eval_index = eval_index
        self._eval_cache = None
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.hooks = list(hooks)
        self.history = []

    # ------------------------------------------------------------ data

    def _tensorize(self, index):
        seqs = index.sequences()
        if not seqs:
            raise DataExhausted("empty corpus")
        dtype = next(self.state.net.parameters()).dtype
        x = torch.from_numpy(np.stack([s.joints for s in seqs])).to(dtype)
        ya = torch.tensor([self.act_of[s.action_id] for s in seqs])
        yp = torch.tensor([self.actor_of[s.actor_id] for s in seqs])
        return x, ya, yp

    def _quad_rows(self):
        if self._quads is None:
            grids = enumerate_quadruple_cells(self.index.entries)
            if not grids:
                raise NoValidPairs("training corpus cannot form any quadruple")
            canon = np.array([[self._row[e.source] for e in g] for g in grids])
            order = np.random.default_rng(self.cfg.seed).permutation(len(canon))
            canon = canon[order]
            swapped = canon[:, [3, 2, 1, 0]]
            self._quads = np.concatenate([canon, swapped])
        return self._quads

    def _epoch_rng(self):
        s = self.state
        return np.random.default_rng([self.cfg.seed, s.stage_index, s.epoch])

    def batches(self, paired):
        """Deterministic batches for the current (stage, epoch)."""
        rng = self._epoch_rng()
        bs = self.cfg.batch_size
        if not paired:
            order = rng.permutation(len(self.x))
            for i in range(0, len(order), bs):
                rows = torch.from_numpy(order[i:i + bs])
                yield _Batch(self.x[rows], self.y_action[rows], self.y_actor[rows], rows=rows)
            return
        quads = self._quad_rows()
        quads = quads[rng.permutation(len(quads))]
        for i in range(0, len(quads), bs):
            chunk = quads[i:i + bs]
            uniq, inv = np.unique(chunk, return_inverse=True)
            rows = torch.from_numpy(uniq)
            yield _Batch(self.x[rows], self.y_action[rows], self.y_actor[rows],
                         torch.from_numpy(inv.reshape(chunk.shape)), rows)

    # ------------------------------------------------------------ steps

    def _call_hooks(self, which, kind):
        for h in self.hooks:
            fn = getattr(h, which, None)
            if fn is not None:
                fn(kind, self.state)

    def autoencoder_terms(self, batch, kind):
        """Loss terms for an autoencoder step of stage ``kind`` (graph attached)."""
        net, w = self.state.net, self.cfg.weights
        x = batch.x
        m, p = net.encode(x)
        x_hat = net.decode(m, p)
        terms = {"rec": L.reconstruction_loss(x, x_hat), "smooth": L.smooth_loss(x, x_hat)}
        if kind in ("unpaired", "paired"):
            terms["coop"] = L.cooperative_loss(net.classify("M", m), net.classify("P", p),
                                               batch.action, batch.actor)
            terms["adv"] = L.adversarial_loss(net.classify("M", p), net.classify("P", m),
                                              net.discriminate(x_hat), batch.action, batch.actor)
        if kind == "paired":
            q = batch.quads
            motion = tuple(m[q[:, k]] for k in range(4))
            privacy = tuple(p[q[:, k]] for k in range(4))
            cross_hat = net.decode(motion[0], privacy[3])
            terms["cross"] = L.cross_reconstruction_loss(cross_hat, x[q[:, 2]])
            terms["ee"] = L.end_effector_loss(x[q[:, 0]], cross_hat, self.topology)
            terms["trip"] = L.triplet_loss(motion, privacy, w.gamma)
            terms["latent"] = L.latent_consistency_loss(motion, privacy)
        return terms

    def autoencoder_step(self, batch, kind):
        net = self.state.net
        ae = net.group_modules("autoencoder")
        others = [m for g in CLASSIFIER_GROUPS for m in net.group_modules(g)]
        _set_trainable(ae, True)
        _set_trainable(others, False)
        self._call_hooks("before_step", "autoencoder")
        terms = self.autoencoder_terms(batch, kind)
        total = L.weighted_total(terms, self.cfg.weights, kind)
        self._check_finite(terms, total)
        opt = self.state.optimizers["autoencoder"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.grad_clip > 0:
            # per module, so large encoder gradients never throttle the decoder
            for m in ae:
                torch.nn.utils.clip_grad_norm_(m.parameters(), self.cfg.grad_clip)
        opt.step()
        self.state.step += 1
        self._call_hooks("after_step", "autoencoder")
        return L.total_losses({k: v.detach() for k, v in terms.items()}, self.cfg.weights, kind)

    def classifier_step(self, batch):
        net = self.state.net
        ae = net.group_modules("autoencoder")
        cls = [m for g in CLASSIFIER_GROUPS for m in net.group_modules(g)]
        _set_trainable(ae, False)
        _set_trainable(cls, True)
        self._call_hooks("before_step", "classifiers")
        with torch.no_grad():
            m, p = net.encode(batch.x)
            x_hat = net.decode(m, p)
        mm, mp = net.classify("M", m), net.classify("M", p)
        pm, pp = net.classify("P", m), net.classify("P", p)
        terms = {
            "M": L.classifier_losses(mm, mp, batch.action, "M"),
            "P": L.classifier_losses(pm, pp, batch.actor, "P"),
            "qc": L.quality_controller_loss(net.discriminate(batch.x), net.discriminate(x_hat)),
        }
        total = L.weighted_total(terms, self.cfg.weights, "classifier")
        self._check_finite(terms, total)
        for g in CLASSIFIER_GROUPS:
            self.state.optimizers[g].zero_grad(set_to_none=True)
        total.backward()
        for g in CLASSIFIER_GROUPS:
            self.state.optimizers[g].step()
        self.state.step += 1
        self._call_hooks("after_step", "classifiers")
        report = L.total_losses({k: v.detach() for k, v in terms.items()}, self.cfg.weights, "classifier")
        acc = {
            "acc_M_motion": accuracy(mm, batch.action), "acc_M_privacy": accuracy(mp, batch.action),
            "acc_P_motion": accuracy(pm, batch.actor), "acc_P_privacy": accuracy(pp, batch.actor),
        }
        return report, acc

    def _check_finite(self, terms, total):
        if not torch.isfinite(total) or any(not torch.isfinite(v) for v in terms.values()):
            ckpt = self._latest_checkpoint()
            raise Divergence(f"non-finite loss at step {self.state.step}: "
                             f"{ {k: float(v.detach()) for k, v in terms.items()} }", ckpt)

    # ------------------------------------------------------------ stages

    def run_pretrain_ae(self, stage: Stage):
        for batch in self.batches(stage.paired):
            rep = self.autoencoder_step(batch, "pretrain_ae")
            self._log("autoencoder", rep)

    def run_pretrain_classifiers(self, stage: Stage):
        for batch in self.batches(stage.paired):
            rep, acc = self.classifier_step(batch)
            self._log("classifiers", rep, acc)

    def run_unpaired(self, stage: Stage):
        self._adversarial_epoch(stage, "unpaired")

    def run_paired(self, stage: Stage):
        self._adversarial_epoch(stage, "paired")

    def _adversarial_epoch(self, stage, kind):
        ratio = max(1, self.cfg.ae_steps_per_cls_step)
        for i, batch in enumerate(self.batches(stage.paired or kind == "paired")):
            rep = self.autoencoder_step(batch, kind)
            self._log("autoencoder", rep)
            if (i + 1) % ratio == 0:
                rep, acc = self.classifier_step(batch)
                self._log("classifiers", rep, acc)

    def run_epoch(self, stage: Stage):
        {
            "pretrain_ae": self.run_pretrain_ae,
            "pretrain_cls": self.run_pretrain_classifiers,
            "unpaired": self.run_unpaired,
            "paired": self.run_paired,
        }[stage.stage_id](stage)

    def _apply_lr(self, stage):
        for g, opt in self.state.optimizers.items():
            base = self.cfg.lr_autoencoder if g == "autoencoder" else self.cfg.lr_classifiers
            lr = stage_lr(base, self.cfg.lr_schedule, self.state.epoch, stage.epochs)
            for group in opt.param_groups:
                group["lr"] = lr

    def run(self, stages=None, until=None):
        """Run the remaining plan (or only the stage ids in ``stages``).

        ``until`` = (stage_index, epoch) stops early once that point is reached,
        leaving the state resumable.
        """
        plan = self.cfg.plan
        s = self.state
        while s.stage_index < len(plan):
            stage = plan[s.stage_index]
            if stages is not None and stage.stage_id not in stages:
                s.stage_index += 1
                s.epoch = 0
                continue
            if s.epoch == 0:
                self._log_eval(stage)
            while s.epoch < stage.epochs:
                if until is not None and (s.stage_index, s.epoch) >= tuple(until):
                    return s
                self._apply_lr(stage)
                self.run_epoch(stage)
                s.epoch += 1
                self._log_eval(stage)
                if self.checkpoint_dir:
                    self.save(self.checkpoint_dir / "latest.pt")
            if self.checkpoint_dir:
                self.save(self.checkpoint_dir / f"stage{s.stage_index + 1}_{stage.stage_id}"
                                                 f"_{'paired' if stage.paired else 'unpaired'}.pt")
            s.stage_index += 1
            s.epoch = 0
        if self.checkpoint_dir:
            self.save(self.checkpoint_dir / "latest.pt")
        return s

    # ------------------------------------------------------------ held-out metrics

    def _eval_tensors(self):
        if self._eval_cache is None and self.eval_index is not None:
            x, ya, yp = self._tensorize(self.eval_index)
            rows = {e.source: i for i, e in enumerate(self.eval_index.entries)}
            grids = enumerate_quadruple_cells(self.eval_index.entries)
            q = torch.tensor([[rows[e.source] for e in g] for g in grids]) if grids else None
            self._eval_cache = (x, ya, yp, q)
        return self._eval_cache

    @torch.no_grad()
    def evaluate_heldout(self):
        """Reconstruction, cross-reconstruction, triplet and classifier accuracies on the eval split."""
        data = self._eval_tensors()
        if data is None:
            return {}
        x, ya, yp, q = data
        net = self.state.net
        was = net.training
        net.eval()
        m, p = net.encode(x)
        out = {
            "rec_mse": float(L.reconstruction_loss(x, net.decode(m, p))),
            "acc_M_motion": accuracy(net.classify("M", m), ya),
            "acc_M_privacy": accuracy(net.classify("M", p), ya),
            "acc_P_motion": accuracy(net.classify("P", m), yp),
            "acc_P_privacy": accuracy(net.classify("P", p), yp),
        }
        if q is not None:
            motion = tuple(m[q[:, k]] for k in range(4))
            privacy = tuple(p[q[:, k]] for k in range(4))
            out["cross_mse"] = float(L.cross_reconstruction_loss(net.decode(motion[0], privacy[3]), x[q[:, 2]]))
            out["triplet"] = float(L.triplet_loss(motion, privacy, self.cfg.weights.gamma))
        net.train(was)
        return out

    # ------------------------------------------------------------ logging

    def _stage_tag(self):
        s = self.state
        if s.stage_index >= len(self.cfg.plan):
            return {"stage": "done"}
        st = self.cfg.plan[s.stage_index]
        return {"stage": st.stage_id, "paired": st.paired, "stage_index": s.stage_index}

    def _log(self, kind, report, acc=None):
        rec = {"event": "step", "kind": kind, **self._stage_tag(), "epoch": self.state.epoch,
               "step": self.state.step, **{k: float(v) for k, v in report.terms.items()},
               "total": float(report.total), **(acc or {})}
        self._emit(rec)

    def _log_eval(self, stage):
        metrics = self.evaluate_heldout()
        if metrics:
            self._emit({"event": "eval", **self._stage_tag(), "epoch": self.state.epoch,
                        "step": self.state.step, **metrics})

    def _emit(self, rec):
        self.history.append(rec)
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    # ------------------------------------------------------------ checkpoints

    def _latest_checkpoint(self):
        if self.checkpoint_dir and (self.checkpoint_dir / "latest.pt").exists():
            return self.checkpoint_dir / "latest.pt"
        return None

    def save(self, path):
        return save_checkpoint(self.state, self.cfg, path)


def save_checkpoint(state: TrainState, cfg: TrainConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "network_config": state.net.cfg.to_dict(),
        "train_config": json.dumps(cfg.to_dict(), sort_keys=True),
        "model": state.net.state_dict(),
        "optimizers": {g: o.state_dict() for g, o in state.optimizers.items()},
        "actions": list(state.actions),
        "actors": list(state.actors),
        "stage_index": state.stage_index,
        "epoch": state.epoch,
        "step": state.step,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg: TrainConfig | None = None, net_cfg: NetworkConfig | None = None):
    """Restore a TrainState. Raises CorruptCheckpoint or VersionMismatch."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except (RuntimeError, EOFError, zipfile.BadZipFile, ValueError, OSError, pickle.UnpicklingError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or "format" not in payload:
        raise CorruptCheckpoint(f"{path}: not a checkpoint")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"{path}: format {payload['format']!r}, expected {CHECKPOINT_FORMAT!r}")
    stored = NetworkConfig(**payload["network_config"])
    if net_cfg is not None and net_cfg.to_dict() != stored.to_dict():
        raise VersionMismatch(f"{path}: network config differs from the requested one")
    cfg = cfg or train_config_from_json(payload["train_config"])
    net = PMRNet(stored.validate())
    net.load_state_dict(payload["model"])
    opts = make_optimizers(net, cfg)
    for g, o in opts.items():
        o.load_state_dict(payload["optimizers"][g])
    return TrainState(net, opts, payload["actions"], payload["actors"],
                      payload["stage_index"], payload["epoch"], payload["step"])


def train_config_from_json(text):
    d = json.loads(text)
    d["weights"] = L.LossWeights(**d["weights"])
    d["plan"] = parse_plan(d["plan"])
    return TrainConfig(**d)


def checkpoint_config(path):
    """(TrainConfig, NetworkConfig) stored in a checkpoint."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, zipfile.BadZipFile, ValueError, pickle.UnpicklingError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    return train_config_from_json(payload["train_config"]), NetworkConfig(**payload["network_config"])


def stage_history(history, stage_id, event="eval"):
    return [r for r in history if r.get("event") == event and r.get("stage") == stage_id]
