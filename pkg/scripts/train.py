#!/usr/bin/env python3
"""
Train - Metric-learning training loop for the function encoder
m-per-class batch sampling, online batch-hard mining on cosine similarity,
Circle Loss, Adam with gradient accumulation, checkpointing.
"""

import json
import logging
import queue
import sys
import threading
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).parent))
from utils import config_section, configure_threads, load_config, log_operation
from error_recovery import ConfigError, MiningError, SamplingError, TrainingError
from corpus import CorpusIndex, read_normalized
from vocab import GlobalAttentionPolicy, Vocabulary, encode_batch
from encoder import EncoderConfig, FaserEncoder
from checkpoint import save_checkpoint

logger = logging.getLogger('faser.train')


def _from_section(cls, config: Dict, section: str, **overrides):
    settings = config_section(config, section)
    known = {f.name for f in fields(cls)}
    unknown = set(settings) - known
    if unknown:
        raise ConfigError(f"unknown {section} settings: {', '.join(sorted(unknown))}")
    settings.update({k: v for k, v in overrides.items() if v is not None})
    obj = cls(**settings)
    obj.validate()
    return obj


@dataclass
class SamplerConfig:
    m: int = 2
    batch_size: int = 8
    functions_per_epoch: Optional[int] = None
    seed: int = 0

    @classmethod
    def from_config(cls, config: Dict, **overrides) -> 'SamplerConfig':
        return _from_section(cls, config, 'sampler', **overrides)

    def validate(self):
        if self.m < 2:
            raise ConfigError(f"sampler.m must be >= 2, got {self.m}")
        if self.batch_size % self.m:
            raise ConfigError(f"batch_size {self.batch_size} not divisible by m {self.m}")
        if self.batch_size // self.m < 2:
            raise ConfigError("a batch needs at least two labels for negatives to exist")
        if self.functions_per_epoch is not None and self.functions_per_epoch < self.batch_size:
            raise ConfigError("functions_per_epoch must hold at least one batch")


@dataclass
class CircleLossConfig:
    margin: float = 0.25
    gamma: float = 256.0
    all_pairs: bool = False
    detach_weights: bool = False

    @classmethod
    def from_config(cls, config: Dict, **overrides) -> 'CircleLossConfig':
        return _from_section(cls, config, 'circle_loss', **overrides)

    def validate(self):
        if not 0.0 < self.margin < 1.0:
            raise ConfigError(f"circle_loss.margin must be in (0, 1), got {self.margin}")
        if self.gamma <= 0:
            raise ConfigError(f"circle_loss.gamma must be > 0, got {self.gamma}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.0005
    accumulation_steps: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, config: Dict, **overrides) -> 'OptimizerConfig':
        return _from_section(cls, config, 'optimizer', **overrides)

    def validate(self):
        # lr 0 is accepted: moments still update while parameters stay put
        if self.learning_rate < 0:
            raise ConfigError(f"optimizer.learning_rate must be >= 0, got {self.learning_rate}")
        if self.accumulation_steps < 1:
            raise ConfigError("optimizer.accumulation_steps must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 30
    loss: str = "circle"
    triplet_margin: float = 0.2
    save_every: int = 0
    seed: int = 0
    prefetch_depth: int = 4

    @classmethod
    def from_config(cls, config: Dict, **overrides) -> 'TrainConfig':
        return _from_section(cls, config, 'train', **overrides)

    def validate(self):
        if self.loss not in ("circle", "triplet"):
            raise ConfigError(f"train.loss must be circle or triplet, got {self.loss!r}")
        if self.epochs < 0 or self.save_every < 0:
            raise ConfigError("train.epochs and train.save_every must be >= 0")


# --- Sampling ---

def sample_batches(index: CorpusIndex, cfg: SamplerConfig, epoch: int = 0) -> List[List[int]]:
    """m-per-class batches for one epoch, as corpus positions.

    Labels are drawn without replacement until the pool runs dry, then a
    fresh permutation starts; m distinct examples are drawn per label.
    """
    labels_per_batch = cfg.batch_size // cfg.m
    labels = index.labels
    for label in labels:
        count = len(index.members(label))
        if count < cfg.m:
            raise SamplingError(f"label {label!r} has {count} example(s), sampler needs m={cfg.m}")
    if len(labels) < labels_per_batch:
        raise SamplingError(f"corpus has {len(labels)} labels, a batch needs {labels_per_batch}")

    total = cfg.functions_per_epoch or len(labels) * cfg.m
    rng = np.random.default_rng([cfg.seed, epoch])
    pool: List[str] = []
    batches = []
    for _ in range(max(1, total // cfg.batch_size)):
        if len(pool) < labels_per_batch:
            pool = [labels[i] for i in rng.permutation(len(labels))]
        chosen, pool = pool[:labels_per_batch], pool[labels_per_batch:]
        batch = []
        for label in chosen:
            members = index.members(label)
            batch.extend(members[i] for i in rng.choice(len(members), size=cfg.m, replace=False))
        batches.append(batch)
    return batches


# --- Mining and losses ---

@dataclass
class MinedPairs:
    positive_index: torch.Tensor
    positive_sim: torch.Tensor
    negative_index: torch.Tensor
    negative_sim: torch.Tensor


def _label_ids(labels: Sequence) -> torch.Tensor:
    mapping: Dict = {}
    return torch.tensor([mapping.setdefault(label, len(mapping)) for label in labels], dtype=torch.long)


def _check_batch_labels(labels: Sequence):
    counts = Counter(labels)
    if len(counts) < 2:
        raise MiningError("batch needs at least two labels")
    singles = sorted(str(label) for label, n in counts.items() if n < 2)
    if singles:
        raise MiningError(f"label(s) with a single member in batch: {', '.join(singles)}")


def pair_masks(labels: Sequence):
    label_ids = _label_ids(labels)
    same = label_ids[:, None] == label_ids[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    return same & ~eye, ~same


def mine_batch_hard(embeddings: torch.Tensor, labels: Sequence) -> MinedPairs:
    """Per anchor: least similar positive and most similar negative (lowest index on ties)."""
    _check_batch_labels(labels)
    sims = embeddings @ embeddings.T
    positive, negative = pair_masks(labels)
    p_idx = torch.argmin(sims.detach().masked_fill(~positive, float('inf')), dim=1)
    n_idx = torch.argmax(sims.detach().masked_fill(~negative, float('-inf')), dim=1)
    return MinedPairs(
        positive_index=p_idx,
        positive_sim=sims.gather(1, p_idx[:, None]).squeeze(1),
        negative_index=n_idx,
        negative_sim=sims.gather(1, n_idx[:, None]).squeeze(1),
    )


def _circle_logits(sp: torch.Tensor, sn: torch.Tensor, cfg: CircleLossConfig):
    alpha_p = torch.clamp_min(1.0 + cfg.margin - sp, 0.0)
    alpha_n = torch.clamp_min(sn + cfg.margin, 0.0)
    if cfg.detach_weights:
        alpha_p, alpha_n = alpha_p.detach(), alpha_n.detach()
    logit_p = -alpha_p * (sp - (1.0 - cfg.margin)) * cfg.gamma
    logit_n = alpha_n * (sn - cfg.margin) * cfg.gamma
    return logit_p, logit_n


def circle_loss(pairs: MinedPairs, cfg: CircleLossConfig) -> torch.Tensor:
    """Circle Loss over one mined positive and negative per anchor, averaged over anchors."""
    logit_p, logit_n = _circle_logits(pairs.positive_sim, pairs.negative_sim, cfg)
    return F.softplus(logit_n + logit_p).mean()


def circle_loss_all_pairs(embeddings: torch.Tensor, labels: Sequence, cfg: CircleLossConfig) -> torch.Tensor:
    """Circle Loss with every in-batch positive and negative per anchor."""
    _check_batch_labels(labels)
    sims = embeddings @ embeddings.T
    positive, negative = pair_masks(labels)
    logit_p, logit_n = _circle_logits(sims, sims, cfg)
    logit_p = logit_p.masked_fill(~positive, float('-inf'))
    logit_n = logit_n.masked_fill(~negative, float('-inf'))
    return F.softplus(torch.logsumexp(logit_n, dim=1) + torch.logsumexp(logit_p, dim=1)).mean()


def triplet_loss(pairs: MinedPairs, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss on cosine similarity."""
    return F.relu(pairs.negative_sim - pairs.positive_sim + margin).mean()


# --- Training ---

class BatchPrefetcher:
    """Prepares batches on a worker thread through a bounded queue."""

    _DONE = object()

    def __init__(self, batches: Sequence, prepare: Callable, depth: int = 4):
        self.batches = batches
        self.prepare = prepare
        self.queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))

    def _work(self):
        try:
            for batch in self.batches:
                self.queue.put(self.prepare(batch))
        except Exception as e:  # forwarded to the consumer
            self.queue.put(e)
        self.queue.put(self._DONE)

    def __iter__(self) -> Iterator:
        worker = threading.Thread(target=self._work, daemon=True)
        worker.start()
        while True:
            item = self.queue.get()
            if item is self._DONE:
                break
            if isinstance(item, Exception):
                raise item
            yield item
        worker.join()


class Trainer:
    """Owns the model, the optimizer state and the step counter."""

    def __init__(self, model: FaserEncoder, index: CorpusIndex, vocab: Vocabulary,
                 sampler: SamplerConfig, loss: CircleLossConfig, optim: OptimizerConfig,
                 train: TrainConfig, out_dir: Optional[Path] = None, threads: int = 1,
                 global_policy: GlobalAttentionPolicy = GlobalAttentionPolicy()):
        self.model = model
        self.index = index
        self.vocab = vocab
        self.sampler_cfg = sampler
        self.loss_cfg = loss
        self.optim_cfg = optim
        self.train_cfg = train
        self.out_dir = Path(out_dir) if out_dir else None
        self.threads = threads
        self.global_policy = global_policy
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=optim.learning_rate,
            betas=(optim.beta1, optim.beta2), eps=optim.eps, weight_decay=0.0,
        )
        self.step = 0
        self.history: List[Dict] = []

    def prepare(self, batch: Sequence[int]):
        functions = [self.index.functions[i] for i in batch]
        ids, attention, global_mask = encode_batch(functions, self.vocab, self.model.cfg.input_len,
                                                   self.global_policy)
        return ids, attention, global_mask, [fn.label for fn in functions]

    def compute_loss(self, embeddings: torch.Tensor, labels: Sequence) -> torch.Tensor:
        if self.train_cfg.loss == "triplet":
            return triplet_loss(mine_batch_hard(embeddings, labels), self.train_cfg.triplet_margin)
        if self.loss_cfg.all_pairs:
            return circle_loss_all_pairs(embeddings, labels, self.loss_cfg)
        return circle_loss(mine_batch_hard(embeddings, labels), self.loss_cfg)

    def _prepared(self, batches: Sequence) -> Iterable:
        if self.threads > 1:
            return BatchPrefetcher(batches, self.prepare, self.train_cfg.prefetch_depth)
        return (self.prepare(batch) for batch in batches)

    def _log_step(self, record: Dict):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "train_log.jsonl", 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')

    def _optimizer_step(self, batch_index: int, epoch: int, loss: float):
        for name, param in self.model.named_parameters():
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise TrainingError(f"non-finite gradient in {name}", batch_index=batch_index)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step += 1
        self._log_step({'step': self.step, 'epoch': epoch, 'loss': loss,
                        'lr': self.optim_cfg.learning_rate})
        if self.train_cfg.save_every and self.step % self.train_cfg.save_every == 0:
            self.save(f"checkpoint-step{self.step:06d}.fasr")

    @torch.no_grad()
    def measure_loss(self, epoch: int = 0) -> float:
        """Mean batch loss over an epoch's batches without updating anything."""
        was_training = self.model.training
        self.model.eval()
        losses = []
        for ids, attention, global_mask, labels in self._prepared(sample_batches(self.index, self.sampler_cfg, epoch)):
            losses.append(float(self.compute_loss(self.model(ids, attention, global_mask), labels)))
        self.model.train(was_training)
        return float(np.mean(losses))

    def train_epoch(self, epoch: int) -> Dict:
        """One pass of micro-batches; Adam steps every accumulation_steps micro-batches."""
        batches = sample_batches(self.index, self.sampler_cfg, epoch)
        accumulation = self.optim_cfg.accumulation_steps
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)

        losses: List[float] = []
        pending: List[float] = []
        steps_before = self.step
        progress = tqdm(self._prepared(batches), total=len(batches), desc=f"epoch {epoch}",
                        leave=False, disable=None)
        for batch_index, (ids, attention, global_mask, labels) in enumerate(progress):
            embeddings = self.model(ids, attention, global_mask)
            loss = self.compute_loss(embeddings, labels)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()}", batch_index=batch_index)
            (loss / accumulation).backward()
            losses.append(loss.item())
            pending.append(loss.item())
            if len(pending) == accumulation:
                self._optimizer_step(batch_index, epoch, float(np.mean(pending)))
                pending = []
        if pending:
            self._optimizer_step(len(batches) - 1, epoch, float(np.mean(pending)))

        metrics = {
            'epoch': epoch,
            'batches': len(batches),
            'optimizer_steps': self.step - steps_before,
            'mean_loss': float(np.mean(losses)),
            'step': self.step,
        }
        self.history.append(metrics)
        self._log_step({'epoch_summary': metrics})
        self.save(f"checkpoint-epoch{epoch:03d}.fasr")
        logger.info(f"Epoch {epoch}: mean loss {metrics['mean_loss']:.4f} over {len(batches)} batches")
        return metrics

    def fit(self, epochs: int) -> List[Dict]:
        if self.step == 0 and self.out_dir is not None:
            # a fresh run replaces the log of any earlier run in the same directory
            (self.out_dir / "train_log.jsonl").unlink(missing_ok=True)
        torch.manual_seed(self.train_cfg.seed)
        for epoch in range(epochs):
            self.train_epoch(epoch)
        return self.history

    def save(self, name: str):
        if self.out_dir is None:
            return
        save_checkpoint(self.out_dir / name, self.model)
        save_checkpoint(self.out_dir / "checkpoint.fasr", self.model)


class TrainingRun:
    """Corpus + vocabulary + config -> trained checkpoint directory."""

    def __init__(self, config: Optional[Dict] = None):
        self.config = config if config is not None else load_config()

    def run(self, corpus_path, vocab_path, out_dir, seed: Optional[int] = None,
            epochs: Optional[int] = None, save_every: Optional[int] = None,
            threads: Optional[int] = None) -> Dict:
        out_dir = Path(out_dir)
        vocab = Vocabulary.load(vocab_path)
        index = CorpusIndex(read_normalized(corpus_path))

        sampler = SamplerConfig.from_config(self.config, seed=seed)
        loss = CircleLossConfig.from_config(self.config)
        optim = OptimizerConfig.from_config(self.config)
        train = TrainConfig.from_config(self.config, seed=seed, epochs=epochs, save_every=save_every)
        encoder_cfg = EncoderConfig.from_config(self.config, vocab_size=len(vocab))
        policy = GlobalAttentionPolicy(int(config_section(self.config, 'vocab').get('global_stride', 0)))
        if threads is None:
            threads = config_section(self.config, 'runtime').get('threads')
        threads = configure_threads(threads)

        model = FaserEncoder.create(encoder_cfg, seed=train.seed)
        trainer = Trainer(model, index, vocab, sampler, loss, optim, train,
                          out_dir=out_dir, threads=threads, global_policy=policy)
        initial_loss = trainer.measure_loss(0)
        history = trainer.fit(train.epochs)
        trainer.save("checkpoint.fasr")

        summary = {
            'functions': len(index),
            'labels': len(index.labels),
            'epochs': train.epochs,
            'optimizer_steps': trainer.step,
            'initial_loss': initial_loss,
            'final_loss': history[-1]['mean_loss'] if history else initial_loss,
            'encoder': encoder_cfg.to_dict(),
            'sampler': asdict(sampler),
            'circle_loss': asdict(loss),
            'optimizer': asdict(optim),
        }
        with open(out_dir / "train_summary.json", 'w') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        log_operation('Train', 'run', 'success', {
            k: summary[k] for k in ('functions', 'labels', 'epochs', 'optimizer_steps',
                                    'initial_loss', 'final_loss')
        })
        return summary


def main(argv=None):
    """CLI entry point."""
    import argparse

    parser = argparse.ArgumentParser(description='Train - metric-learning training')
    parser.add_argument('--corpus', required=True, help='Deduplicated normalized corpus (JSONL)')
    parser.add_argument('--vocab', required=True)
    parser.add_argument('--config', help='YAML config merged over config.yaml')
    parser.add_argument('--out-dir', required=True)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--save-every', type=int, help='Also checkpoint every N optimizer steps')
    parser.add_argument('--threads', type=int)
    args = parser.parse_args(argv)

    run = TrainingRun(load_config(args.config))
    summary = run.run(args.corpus, args.vocab, args.out_dir, seed=args.seed, epochs=args.epochs,
                      save_every=args.save_every, threads=args.threads)
    print(json.dumps({k: summary[k] for k in ('epochs', 'optimizer_steps', 'initial_loss', 'final_loss')}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
