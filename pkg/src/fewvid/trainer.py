"""Episodic training, evaluation, ablation, and alignment diagnostics.

One optimizer step per episode: the synthetic episode is sampled from a
pre-rendered clip bank, pushed through sampler -> embedding -> alignment ->
metric, and the classification loss plus the enabled mutual-information
terms are backpropagated. The MI estimator heads train on detached features
under their own optimizer. Module toggles (from RunConfig) choose which
stages run and, via `optimizer_parameters`, which weights the main
optimizer owns.

Determinism: episode streams, perturbation noise, and weight init all
derive from the run seed, so a fixed seed reproduces metrics byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import metric, miloss
from .alignment import AlignmentModel, EmbedNetwork, VideoFeature, alignment_cost_batch
from .config import RunConfig, config_hash
from .data import ClipBank, build_class_table, sample_episode, split_classes
from .sampler import SelectionMatrix, TaskParams, VideoSampler, select_frames, uniform_selection
from .scanner import FrameFeatures, ScanNetwork, VideoSummary

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries recovery paths."""

    def __init__(self, message, checkpoint_path=None, dump_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.dump_path = dump_path


@dataclass
class EpisodeResult:
    bundle: miloss.LossBundle
    head_loss: torch.Tensor | None
    accuracy: float
    mean_align_cost: float | None
    predictions: list[metric.EpisodePrediction]
    diagnostics: dict


@dataclass
class EvalResult:
    accuracy: float
    ci95: float
    per_episode: np.ndarray
    mean_align_cost: float | None

    @staticmethod
    def from_accuracies(accs: np.ndarray, costs: list[float] | None = None) -> "EvalResult":
        mean = float(accs.mean())
        ci = 1.96 * float(accs.std(ddof=1)) / np.sqrt(len(accs)) if len(accs) > 1 else 0.0
        cost = float(np.mean(costs)) if costs else None
        return EvalResult(accuracy=mean, ci95=ci, per_episode=accs, mean_align_cost=cost)


class FewShotVideoModel(nn.Module):
    """All learnable stages of the pipeline under one roof.

    Which stages run on a given forward pass is decided by the RunConfig
    passed to `forward_episode`, so evaluation-time isolation (dropping the
    sampler or the alignment of a trained model) needs no surgery.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.arch = cfg
        scan = ScanNetwork(3, cfg.scan_channels, cfg.scan_resolution)
        self.sampler = VideoSampler(scan, cfg.num_select, cfg.evaluator_hidden,
                                    cfg.noise_samples)
        from .sampler import ParamGenerator, TaskEncoder

        self.task_encoder = TaskEncoder(cfg.scan_channels)
        self.param_gen = ParamGenerator(cfg.evaluator_hidden, cfg.scan_channels)
        self.embed = EmbedNetwork(3, cfg.embed_channels)
        self.align = AlignmentModel(cfg.embed_channels)
        self.intra_mi = miloss.LabelFeatureMI(cfg.scan_channels, cfg.way)
        self.inter_mi = miloss.LabelFeatureMI(cfg.embed_channels, cfg.way)
        self.inter_ff = miloss.FeatureFeatureMI(cfg.embed_channels, cfg.embed_channels)

    # ---------------------------------------------------------------- helpers

    def optimizer_parameters(self, cfg: RunConfig) -> list[nn.Parameter]:
        """Parameters the main optimizer should own under these toggles."""
        params = list(self.embed.parameters())
        need_scan = cfg.sampler_on and (cfg.ts_on or cfg.sa_on or cfg.intra_on)
        ada = cfg.sampler_on and cfg.ada_on and (cfg.ts_on or cfg.sa_on)
        if need_scan:
            params += list(self.sampler.scan_net.parameters())
        if cfg.sampler_on and cfg.ts_on:
            params += list(self.sampler.evaluator.w1.parameters())
            params.append(self.sampler.evaluator.base_head)
        if cfg.sampler_on and cfg.sa_on:
            params.append(self.sampler.base_saliency_weights)
        if ada:
            params += list(self.task_encoder.parameters())
            if cfg.ts_on:
                params += list(self.param_gen.gen_ts.parameters())
            if cfg.sa_on:
                params += list(self.param_gen.gen_sa.parameters())
        if cfg.tc_on:
            params += list(self.align.warp_head.parameters())
            params += list(self.align.rearrange.parameters())
        if cfg.sc_on:
            params += list(self.align.offset_head.parameters())
        return params

    def optimizer_param_groups(self, cfg: RunConfig) -> list[dict]:
        """Parameter groups with per-group learning-rate scales.

        Alignment heads transform features they cannot yet trust early in
        training; a smaller learning rate keeps them near their identity
        init until the embedding carries signal.
        """
        align_ids = {id(p) for m in (self.align.warp_head, self.align.rearrange,
                                     self.align.offset_head)
                     for p in m.parameters()}
        params = self.optimizer_parameters(cfg)
        main = [p for p in params if id(p) not in align_ids]
        align = [p for p in params if id(p) in align_ids]
        groups = [{"params": main, "lr_scale": 1.0}]
        if align:
            groups.append({"params": align, "lr_scale": cfg.align_lr_scale})
        return groups

    def head_parameters(self, cfg: RunConfig) -> list[nn.Parameter]:
        params: list[nn.Parameter] = []
        if cfg.intra_on:
            params += list(self.intra_mi.parameters())
        if cfg.inter_on:
            params += list(self.inter_mi.parameters()) + list(self.inter_ff.parameters())
        return params

    def _scan_all(self, clips: torch.Tensor) -> FrameFeatures:
        b, m = clips.shape[:2]
        ff = self.sampler.scan_net.scan(clips.reshape(b * m, *clips.shape[2:]))
        return FrameFeatures(per_frame=ff.per_frame.reshape(b, m, *ff.per_frame.shape[1:]),
                             pooled=ff.pooled.reshape(b, m, -1))

    def _task_params(self, ff: FrameFeatures, num_support: int, train: bool,
                     generator) -> TaskParams:
        summaries = [VideoSummary(g=ff.per_frame[i].mean(dim=0)) for i in range(num_support)]
        summary = self.task_encoder(summaries, train=train, generator=generator)
        return self.param_gen(summary.f_t)

    # ------------------------------------------------------------- main pass

    def forward_episode(
        self,
        support: torch.Tensor,
        support_labels: torch.Tensor,
        query: torch.Tensor,
        query_labels: torch.Tensor,
        cfg: RunConfig,
        *,
        train: bool,
        sigma: float = 0.1,
        generator: torch.Generator | None = None,
        collect_diagnostics: bool = False,
    ) -> EpisodeResult:
        """Run one episode end to end and return losses and predictions.

        support: [N*K, M, C, H, W]; query: [N*Q, M, C, H, W]; labels are
        episode-local ints.
        """
        num_support = support.shape[0]
        clips = torch.cat([support, query], dim=0)
        b, m = clips.shape[:2]
        labels_all = torch.cat([support_labels, query_labels])

        need_scan = cfg.sampler_on and (cfg.ts_on or cfg.sa_on or cfg.intra_on)
        ada = cfg.sampler_on and cfg.ada_on and (cfg.ts_on or cfg.sa_on)
        ff_all = self._scan_all(clips) if need_scan else None
        task = self._task_params(ff_all, num_support, train, generator) if ada else None

        mode = "train" if train else "eval"
        diag_sampler = None
        sampled_vec = None  # [B, c] per-video pooled features of selected frames
        if cfg.sampler_on and (cfg.ts_on or cfg.sa_on):
            out = self.sampler.sample_batch(
                clips, mode=mode, sigma=sigma, task=task,
                select_temporal=cfg.ts_on, amplify_spatial=cfg.sa_on,
                per_frame=None if ff_all is None else ff_all.per_frame,
                pooled=None if ff_all is None else ff_all.pooled,
                generator=generator)
            frames = out.frames  # [B, T, C, H, W]
            sampled_vec = out.features.mean(dim=(1, 3, 4))
            if collect_diagnostics:
                diag_sampler = out.diagnostics
        else:
            sel = uniform_selection(m, self.arch.num_select, dtype=clips.dtype)
            frames = torch.einsum("mt,bmchw->btchw", sel.indicator, clips)
            if need_scan:
                feats = torch.einsum("mt,bmchw->btchw", sel.indicator, ff_all.per_frame)
                sampled_vec = feats.mean(dim=(1, 3, 4))

        emb = self.embed.embed_frames(frames.reshape(b * frames.shape[1], *frames.shape[2:]))
        emb = emb.reshape(b, frames.shape[1], *emb.shape[1:]).permute(0, 2, 1, 3, 4)
        pooled_emb = emb.mean(dim=(3, 4))  # [B, Ce, T]

        align_on = cfg.tc_on or cfg.sc_on
        by_class: dict[int, list[int]] = {}
        for i in range(num_support):
            by_class.setdefault(int(support_labels[i]), []).append(i)
        num_query = query.shape[0]
        q_offset = num_support

        predictions, aligned_true, costs = [], [], []
        align_dumps = []
        if align_on:
            perturb = cfg.offset_perturb_std if train else 0.0
            prepared = [self.align.prepare(VideoFeature(F=emb[i]), use_temporal=cfg.tc_on)
                        for i in range(b)]
            bar_s, bar_q, evo, offsets = self.align.align_pairs_batch(
                prepared[:num_support], prepared[q_offset:], use_temporal=cfg.tc_on,
                use_spatial=cfg.sc_on, perturb_std=perturb, generator=generator)
            # per (query, class) prototypes from that query's aligned supports
            classes = sorted(by_class)
            idx_by_class = torch.tensor([by_class[c] for c in classes])  # [N, K]
            protos = bar_s[:, idx_by_class].mean(dim=2)  # [Qn, N, C, T]
            q_per_class = bar_q[:, idx_by_class].mean(dim=2)  # [Qn, N, C, T]
            num = (q_per_class * protos).sum(dim=2)
            denom = q_per_class.norm(dim=2) * protos.norm(dim=2) + metric.EPS
            dists = (1 - num / denom).sum(dim=-1)  # [Qn, N]
            probs_all = torch.softmax(-dists, dim=1)

            phi_s = torch.stack([torch.stack([p.phi.a, p.phi.b]) for p in prepared[:num_support]])
            phi_q = torch.stack([torch.stack([p.phi.a, p.phi.b]) for p in prepared[q_offset:]])
            pair_costs = alignment_cost_batch(phi_s.detach(), phi_q.detach(),
                                              evo.detach(), offsets.detach())
            costs = pair_costs.flatten().tolist()

            for qi in range(num_query):
                probs = probs_all[qi]
                predictions.append(metric.EpisodePrediction(probs=probs,
                                                            predicted=int(probs.argmax())))
                true_class = int(query_labels[qi])
                aligned_true.append(q_per_class[qi, true_class].mean(dim=1))
                if collect_diagnostics:
                    si = by_class[classes[true_class]][0]
                    align_dumps.append({
                        "evolution": evo[qi, si].detach(),
                        "offsets": offsets[qi, si].detach(),
                        "phi": torch.stack([phi_s[si], phi_q[qi]]).detach(),
                    })
        else:
            protos = metric.build_prototypes(
                {c: [pooled_emb[si] for si in idx] for c, idx in by_class.items()})
            for qi in range(num_query):
                predictions.append(metric.classify(pooled_emb[q_offset + qi], protos))

        l_cls = metric.cls_loss(predictions, [int(v) for v in query_labels])

        zero = l_cls.detach() * 0
        l_intra = zero
        head_losses = []
        if cfg.intra_on and need_scan and sampled_vec is not None:
            dense_vec = ff_all.pooled.mean(dim=1)  # [B, c]
            l_intra = miloss.intra_loss(self.intra_mi, sampled_vec, dense_vec, labels_all)
            head_losses.append(self.intra_mi.head_loss(
                torch.cat([sampled_vec, dense_vec]), torch.cat([labels_all, labels_all])))

        l_inter = zero
        if cfg.inter_on and align_on:
            aligned_vec = torch.stack(aligned_true)  # [Qn, Ce]
            raw_vec = pooled_emb[q_offset:].mean(dim=2)  # [Qn, Ce]
            l_inter = miloss.inter_loss(self.inter_mi, self.inter_ff,
                                        aligned_vec, raw_vec, query_labels)
            head_losses.append(self.inter_mi.head_loss(aligned_vec, query_labels))
            head_losses.append(self.inter_ff.head_loss(aligned_vec, raw_vec))

        if all(torch.isfinite(v) for v in (l_cls, l_intra, l_inter)):
            bundle = miloss.total_loss(l_cls, l_intra, l_inter, cfg.mu1, cfg.mu2)
        else:
            # surface the non-finite total for the trainer's divergence guard
            bundle = miloss.LossBundle(cls=l_cls, intra=l_intra, inter=l_inter,
                                       mu1=cfg.mu1, mu2=cfg.mu2,
                                       total=l_cls + cfg.mu1 * l_intra + cfg.mu2 * l_inter)
        correct = sum(int(p.predicted == int(y)) for p, y in zip(predictions, query_labels))
        diagnostics = {}
        if collect_diagnostics:
            diagnostics["frames"] = frames.detach()
            diagnostics["sampler"] = diag_sampler
            diagnostics["alignment"] = align_dumps
            diagnostics["align_costs"] = np.asarray(costs, dtype=np.float64)
        return EpisodeResult(
            bundle=bundle,
            head_loss=torch.stack(head_losses).sum() if head_losses else None,
            accuracy=correct / num_query,
            mean_align_cost=float(np.mean(costs)) if costs else None,
            predictions=predictions,
            diagnostics=diagnostics,
        )


# ------------------------------------------------------------------ schedules


def sigma_at(cfg: RunConfig, epoch: int) -> float:
    return max(cfg.sigma0 * cfg.sigma_decay ** (epoch // cfg.sigma_decay_every),
               cfg.sigma_floor)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


# ----------------------------------------------------------------- data setup


def build_banks(cfg: RunConfig, splits=("train",)) -> dict[str, ClipBank]:
    """Pre-render clip pools for the requested splits."""
    table = build_class_table(cfg.num_classes, seed=cfg.data_seed,
                              sprite_scale=cfg.sprite_scale)
    train_ids, val_ids, test_ids = split_classes(cfg.num_classes, cfg.split,
                                                 seed=cfg.data_seed)
    ids = {"train": train_ids, "val": val_ids, "test": test_ids}
    mis = cfg.misalignment()
    return {
        name: ClipBank(table, ids[name], cfg.clips_per_class, mis,
                       seed=cfg.data_seed + {"train": 0, "val": 1, "test": 2}[name],
                       num_frames=cfg.num_frames, height=cfg.frame_size,
                       width=cfg.frame_size)
        for name in splits
    }


def _episode_tensors(bank: ClipBank, cfg: RunConfig, queries: int, rng):
    from .data import episode_arrays

    task = sample_episode(bank.class_ids, cfg.way, cfg.shot, queries,
                          cfg.misalignment(), rng, bank=bank)
    sx, sy, qx, qy = episode_arrays(task)
    to = lambda arr: torch.from_numpy(arr.transpose(0, 1, 4, 2, 3).copy())  # noqa: E731
    return to(sx), torch.from_numpy(sy), to(qx), torch.from_numpy(qy)


def _episode_generator(seed: int, epoch: int, episode: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(hash((seed, epoch, episode)) % (2**63))
    return gen


# ------------------------------------------------------------------- metrics


class MetricsLog:
    """Append-only per-episode records; wall-clock kept out of the
    determinism-checked file."""

    def __init__(self):
        self.records: list[dict] = []
        self.timings: list[dict] = []

    def append(self, *, epoch: int, episode: int, result: EpisodeResult,
               sigma: float, wall_clock: float, extra: dict | None = None) -> None:
        rec = {
            "epoch": epoch,
            "episode": episode,
            "loss_cls": round(result.bundle.cls.detach().item(), 8),
            "loss_intra": round(result.bundle.intra.detach().item(), 8),
            "loss_inter": round(result.bundle.inter.detach().item(), 8),
            "loss_total": round(result.bundle.total.detach().item(), 8),
            "accuracy": result.accuracy,
            "align_cost": None if result.mean_align_cost is None
            else round(result.mean_align_cost, 8),
            "sigma": sigma,
        }
        if extra:
            rec.update(extra)
        self.records.append(rec)
        self.timings.append({"epoch": epoch, "episode": episode, "wall_clock": wall_clock})

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "metrics.jsonl", "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(run_dir / "timings.jsonl", "w") as f:
            for rec in self.timings:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- checkpoints


def _canonical(obj):
    """Fresh contiguous tensor copies so identical states serialize to
    identical bytes (no storage sharing or view offsets)."""
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().clone().contiguous()
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [_canonical(v) for v in obj]
        return type(obj)(seq) if isinstance(obj, tuple) else seq
    return obj


def save_checkpoint(path, model: FewShotVideoModel, cfg: RunConfig, *,
                    optimizer=None, head_optimizer=None, epoch: int = 0,
                    sigma: float = 0.0, extra: dict | None = None) -> None:
    state = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
        "sigma": sigma,
        "model": _canonical(model.state_dict()),
        "optimizer": None if optimizer is None else _canonical(optimizer.state_dict()),
        "head_optimizer": None if head_optimizer is None
        else _canonical(head_optimizer.state_dict()),
    }
    if extra:
        state.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # the zipfile format serializes canonicalized tensors byte-reproducibly
    # (the legacy format keys storages by memory address)
    torch.save(state, path)


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {state.get('version')}")
    return state


def model_from_checkpoint(path) -> tuple[FewShotVideoModel, RunConfig]:
    state = load_checkpoint(path)
    cfg = RunConfig(**state["config"])
    cfg = dataclasses.replace(cfg, split=tuple(cfg.split))
    model = FewShotVideoModel(cfg)
    model.load_state_dict(state["model"])
    return model, cfg


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------- training


def train(cfg: RunConfig, run_dir=None, *, banks: dict[str, ClipBank] | None = None,
          model: FewShotVideoModel | None = None, log_every: int = 0) -> tuple[FewShotVideoModel, MetricsLog]:
    """Run the episodic training loop; returns the model and its metrics.

    If `run_dir` is given, metrics, the final checkpoint, and (on
    divergence) a diagnostic dump are written there.
    """
    torch.manual_seed(cfg.seed)
    if banks is None:
        banks = build_banks(cfg, splits=("train", "val") if cfg.val_every else ("train",))
    if model is None:
        model = FewShotVideoModel(cfg)

    params = model.optimizer_parameters(cfg)
    groups = model.optimizer_param_groups(cfg)
    group_args = [{"params": g["params"], "lr": cfg.lr * g["lr_scale"]} for g in groups]
    if cfg.optimizer == "sgd":
        optimizer = torch.optim.SGD(group_args, lr=cfg.lr, momentum=cfg.momentum)
    elif cfg.optimizer == "adam":
        optimizer = torch.optim.Adam(group_args, lr=cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    for torch_group, g in zip(optimizer.param_groups, groups):
        torch_group["lr_scale"] = g["lr_scale"]
    head_params = model.head_parameters(cfg)
    head_optimizer = torch.optim.Adam(head_params, lr=cfg.head_lr) if head_params else None

    log = MetricsLog()
    best_val = -1.0
    ckpt_path = None if run_dir is None else Path(run_dir) / "checkpoint.pt"

    for epoch in range(cfg.epochs):
        sigma = sigma_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr_at(cfg, epoch) * group.get("lr_scale", 1.0)
        # alignment joins once the embedding carries signal; aligning noise
        # features early dilutes the selection gradient and can collapse it
        warm = epoch < cfg.align_warmup_epochs and (cfg.tc_on or cfg.sc_on)
        epoch_cfg = dataclasses.replace(cfg, tc_on=False, sc_on=False,
                                        inter_on=False) if warm else cfg
        for episode in range(cfg.episodes_per_epoch):
            t0 = time.perf_counter()
            rng = np.random.default_rng((cfg.seed, epoch, episode))
            sx, sy, qx, qy = _episode_tensors(banks["train"], cfg, cfg.queries, rng)
            gen = _episode_generator(cfg.seed, epoch, episode)

            result = model.forward_episode(sx, sy, qx, qy, epoch_cfg, train=True,
                                           sigma=sigma, generator=gen)
            if not torch.isfinite(result.bundle.total):
                dump = None
                if run_dir is not None:
                    dump = Path(run_dir) / "divergence_dump.npz"
                    np.savez(dump, epoch=epoch, episode=episode,
                             support=sx.numpy(), query=qx.numpy())
                    save_checkpoint(ckpt_path, model, cfg, optimizer=optimizer,
                                    head_optimizer=head_optimizer, epoch=epoch, sigma=sigma)
                    log.write(run_dir)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} episode {episode}",
                    checkpoint_path=ckpt_path, dump_path=dump)

            optimizer.zero_grad(set_to_none=True)
            if result.head_loss is not None:
                head_optimizer.zero_grad(set_to_none=True)
                (result.bundle.total + result.head_loss).backward()
                head_optimizer.step()
            else:
                result.bundle.total.backward()
            torch.nn.utils.clip_grad_norm_(params, max_norm=10.0)
            optimizer.step()
            log.append(epoch=epoch, episode=episode, result=result, sigma=sigma,
                       wall_clock=time.perf_counter() - t0)
            if log_every and (episode + 1) % log_every == 0:
                print(f"epoch {epoch} episode {episode + 1}: "
                      f"loss {float(result.bundle.total):.4f} acc {result.accuracy:.3f}")

        if cfg.val_every and (epoch + 1) % cfg.val_every == 0 and "val" in banks:
            val = evaluate(model, cfg, episodes=cfg.val_episodes, seed=cfg.seed + 977,
                           bank=banks["val"])
            log.records.append({"epoch": epoch, "episode": -1,
                                "val_accuracy": val.accuracy, "val_ci95": val.ci95})
            if val.accuracy > best_val and run_dir is not None:
                best_val = val.accuracy
                save_checkpoint(Path(run_dir) / "best_val.pt", model, cfg,
                                epoch=epoch, sigma=sigma)

    if run_dir is not None:
        save_checkpoint(ckpt_path, model, cfg, optimizer=optimizer,
                        head_optimizer=head_optimizer, epoch=cfg.epochs,
                        sigma=sigma_at(cfg, cfg.epochs - 1))
        log.write(run_dir)
    return model, log


# ----------------------------------------------------------------- evaluation


def evaluate(model: FewShotVideoModel, cfg: RunConfig, *, episodes: int, seed: int,
             bank: ClipBank | None = None, split: str = "test",
             collect_costs: bool = False) -> EvalResult:
    """Accuracy with a 95% normal-approximation CI over evaluation episodes.

    Evaluation is pure: hard top-k, zero task-noise, no offset
    perturbations, and no weight mutation.
    """
    if bank is None:
        bank = build_banks(cfg, splits=(split,))[split]
    accs, costs = [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(episodes):
            rng = np.random.default_rng((seed, i))
            sx, sy, qx, qy = _episode_tensors(bank, cfg, cfg.eval_queries, rng)
            result = model.forward_episode(sx, sy, qx, qy, cfg, train=False,
                                           sigma=cfg.sigma_floor)
            accs.append(result.accuracy)
            if collect_costs and result.mean_align_cost is not None:
                costs.append(result.mean_align_cost)
    if was_training:
        model.train()
    return EvalResult.from_accuracies(np.asarray(accs, dtype=np.float64),
                                      costs if collect_costs else None)


# ------------------------------------------------------------------- ablation

TOGGLE_KEYS = ("sampler_on", "ts_on", "sa_on", "ada_on", "tc_on", "sc_on",
               "intra_on", "inter_on")

COMPONENT_GRID: dict[str, dict[str, bool]] = {
    "baseline": {k: False for k in TOGGLE_KEYS},
    "sampler": {**{k: False for k in TOGGLE_KEYS},
                "sampler_on": True, "ts_on": True, "sa_on": True, "ada_on": True},
    "alignment": {**{k: False for k in TOGGLE_KEYS}, "tc_on": True, "sc_on": True},
    "full": {**{k: True for k in TOGGLE_KEYS}, "intra_on": False, "inter_on": False},
}

LOSS_GRID: dict[str, dict[str, bool]] = {
    "sampler+intra": {**COMPONENT_GRID["sampler"], "intra_on": True},
    "alignment+inter": {**COMPONENT_GRID["alignment"], "inter_on": True},
    "full+losses": {k: True for k in TOGGLE_KEYS},
}

NAMED_GRIDS = {
    "components": COMPONENT_GRID,
    "losses": {**{k: COMPONENT_GRID[k] for k in ("sampler", "alignment")}, **LOSS_GRID},
    "all": {**COMPONENT_GRID, **LOSS_GRID},
}


def ablate(cfg: RunConfig, grid: dict[str, dict[str, bool]], *, eval_episodes: int,
           eval_seed: int | None = None, banks=None) -> list[dict]:
    """Train and evaluate one cell per toggle set, sharing seeds and data."""
    rows = []
    if banks is None:
        banks = build_banks(cfg, splits=("train", "test"))
    eval_seed = cfg.seed + 10_000 if eval_seed is None else eval_seed
    for name, toggles in grid.items():
        cell_cfg = dataclasses.replace(cfg, **toggles)
        model, _ = train(cell_cfg, banks={"train": banks["train"]})
        result = evaluate(model, cell_cfg, episodes=eval_episodes, seed=eval_seed,
                          bank=banks["test"])
        rows.append({"name": name, **toggles,
                     "accuracy": result.accuracy, "ci95": result.ci95})
    return rows


def dump_eval_diagnostics(model: FewShotVideoModel, cfg: RunConfig, run_dir, *,
                          episodes: int, seed: int, bank: ClipBank | None = None) -> Path:
    """Write per-episode diagnostic arrays (frames, saliency, grids, scores,
    evolution matrices, offsets, costs) under run_dir/diagnostics/."""
    if bank is None:
        bank = build_banks(cfg, splits=("test",))["test"]
    out = Path(run_dir) / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for i in range(episodes):
            rng = np.random.default_rng((seed, i))
            sx, sy, qx, qy = _episode_tensors(bank, cfg, cfg.eval_queries, rng)
            result = model.forward_episode(sx, sy, qx, qy, cfg, train=False,
                                           sigma=cfg.sigma_floor,
                                           collect_diagnostics=True)
            arrays = {"frames": result.diagnostics["frames"].numpy(),
                      "accuracy": np.float64(result.accuracy)}
            sampler_diags = result.diagnostics.get("sampler")
            if sampler_diags:
                for key in ("scores", "selected", "saliency", "grid_x", "grid_y"):
                    if key in sampler_diags:
                        arrays[key] = sampler_diags[key].detach().numpy()
            align_dumps = result.diagnostics.get("alignment") or []
            if align_dumps:
                arrays["evolution"] = np.stack([d["evolution"].numpy() for d in align_dumps])
                arrays["offsets"] = np.stack([d["offsets"].numpy() for d in align_dumps])
                arrays["phi"] = np.stack([d["phi"].numpy() for d in align_dumps])
                arrays["align_costs"] = result.diagnostics["align_costs"]
            np.savez(out / f"episode_{i:04d}.npz", **arrays)
    return out


def diagnose_alignment(model: FewShotVideoModel, cfg: RunConfig, *, episodes: int,
                       seed: int, bank: ClipBank | None = None) -> dict:
    """Alignment cost with the sampler on vs uniform sampling, same episodes."""
    if bank is None:
        bank = build_banks(cfg, splits=("test",))["test"]
    cfg_uniform = dataclasses.replace(cfg, sampler_on=False)
    costs = {"sampler": [], "uniform": []}
    model.eval()
    with torch.no_grad():
        for i in range(episodes):
            for key, eval_cfg in (("sampler", cfg), ("uniform", cfg_uniform)):
                rng = np.random.default_rng((seed, i))
                sx, sy, qx, qy = _episode_tensors(bank, eval_cfg, eval_cfg.eval_queries, rng)
                result = model.forward_episode(sx, sy, qx, qy, eval_cfg, train=False,
                                               sigma=eval_cfg.sigma_floor)
                costs[key].append(result.mean_align_cost)
    return {
        "mean_sampler": float(np.mean(costs["sampler"])),
        "mean_uniform": float(np.mean(costs["uniform"])),
        "median_sampler": float(np.median(costs["sampler"])),
        "median_uniform": float(np.median(costs["uniform"])),
        "episodes": episodes,
    }
