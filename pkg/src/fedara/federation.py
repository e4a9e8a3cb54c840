"""Protocol engine: wire payloads, FedAvg, arbitration and the round loop.

Wire format (little-endian)::

    header   16 bytes  magic b"FARA", u8 version, u8 flags, u16 sites,
                       u32 round, u32 sample count
    masks    ceil(r/8) bytes per site, bits LSB-first
    votes    same layout, only when flags & 1 (client uploads in fedara)
    per site float32 B columns, E entries (svd only), A rows, alive slots only
    head     float32 W (row-major) then b

Byte size is therefore fully determined by the layout and the mask, which
is what :func:`payload_size` computes without touching any data.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adapters import AdapterConfig, Flavor, apply_mask, delta_w, live_rank
from .config import ExperimentConfig
from .data import Dataset, PartitionSpec, gen_synthetic, load_csv, partition, split
from .metrics import UndefinedMetricError, dir_discrepancy, mag_discrepancy
from .numerics import ContractError, Rng
from .rank_alloc import BudgetSchedule, arbitrate, gen_local_mask, is_submask
from .trainer import (
    NUM_SITES,
    SITE_NAMES,
    OptState,
    TinyModel,
    build_model,
    evaluate,
    local_train,
    pretrain_base,
    trainable_param_count,
)

log = logging.getLogger(__name__)

MAGIC = b"FARA"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
FLAG_VOTES = 1


class CorruptPayloadError(ValueError):
    pass


@dataclass(frozen=True)
class SiteLayout:
    d_out: int
    d_in: int
    r: int
    has_e: bool

    @property
    def mask_bytes(self) -> int:
        return (self.r + 7) // 8

    @property
    def triplet_width(self) -> int:
        return self.d_out + self.d_in + (1 if self.has_e else 0)


@dataclass(frozen=True)
class WireLayout:
    sites: tuple
    head_shape: tuple

    @property
    def head_count(self) -> int:
        classes, d = self.head_shape
        return classes * d + classes


def wire_layout(model: TinyModel) -> WireLayout:
    sites = tuple(SiteLayout(s.d_out, s.d_in, s.config.r_init, s.has_e) for s in model.sites)
    return WireLayout(sites, model.head_w.shape)


def adapter_param_bytes(layout: WireLayout, mask) -> int:
    return sum(4 * int(np.count_nonzero(m)) * s.triplet_width for s, m in zip(layout.sites, mask))


def payload_size(layout: WireLayout, mask, with_votes: bool = False) -> int:
    mask_bytes = sum(s.mask_bytes for s in layout.sites)
    return (
        HEADER.size
        + mask_bytes * (2 if with_votes else 1)
        + adapter_param_bytes(layout, mask)
        + 4 * layout.head_count
    )


@dataclass
class Payload:
    """Mask-pruned adapters and head. ``sites[n]`` holds only alive slots."""

    round: int
    sample_count: int
    mask: list
    sites: list
    head_w: np.ndarray
    head_b: np.ndarray
    votes: list | None = None

    def to_bytes(self) -> bytes:
        flags = FLAG_VOTES if self.votes is not None else 0
        parts = [HEADER.pack(MAGIC, VERSION, flags, len(self.mask), self.round, self.sample_count)]
        parts += [np.packbits(np.asarray(m, dtype=bool), bitorder="little").tobytes() for m in self.mask]
        if self.votes is not None:
            parts += [np.packbits(np.asarray(m, dtype=bool), bitorder="little").tobytes() for m in self.votes]
        for site in self.sites:
            parts.append(_f32(site["B"].T))
            if "E" in site:
                parts.append(_f32(site["E"]))
            parts.append(_f32(site["A"]))
        parts.append(_f32(self.head_w))
        parts.append(_f32(self.head_b))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, layout: WireLayout) -> Payload:
        if len(data) < HEADER.size:
            raise CorruptPayloadError("payload shorter than its header")
        magic, version, flags, n_sites, rnd, count = HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise CorruptPayloadError("bad magic or version")
        if n_sites != len(layout.sites):
            raise CorruptPayloadError(f"payload has {n_sites} sites, layout has {len(layout.sites)}")
        reader = _Reader(data, HEADER.size)
        mask = [reader.bits(s.r) for s in layout.sites]
        votes = [reader.bits(s.r) for s in layout.sites] if flags & FLAG_VOTES else None
        sites = []
        for s, m in zip(layout.sites, mask):
            k = int(m.sum())
            site = {"B": reader.floats(k * s.d_out).reshape(k, s.d_out).T}
            if s.has_e:
                site["E"] = reader.floats(k)
            site["A"] = reader.floats(k * s.d_in).reshape(k, s.d_in)
            sites.append(site)
        classes, d = layout.head_shape
        head_w = reader.floats(classes * d).reshape(classes, d)
        head_b = reader.floats(classes)
        if reader.pos != len(data):
            raise CorruptPayloadError(f"{len(data) - reader.pos} trailing bytes")
        return cls(rnd, count, mask, sites, head_w, head_b, votes)


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayloadError("payload truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def bits(self, r: int) -> np.ndarray:
        raw = np.frombuffer(self.take((r + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(raw, bitorder="little")
        if bits[r:].any():
            raise CorruptPayloadError("mask bit set beyond the adapter rank")
        return bits[:r].astype(bool)

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def comm_prune_encode(model: TinyModel, mask, sample_count: int = 0, round: int = 0, votes=None) -> Payload:
    """Keep only mask-True triplets; values are rounded to float32 for the wire."""
    if len(mask) != len(model.sites):
        raise ContractError(f"mask has {len(mask)} sites, model has {len(model.sites)}")
    sites = []
    for site, m in zip(model.sites, mask):
        m = np.asarray(m, dtype=bool)
        if m.shape != site.alive.shape:
            raise ContractError("mask length differs from adapter rank")
        packed = {"B": site.B[:, m].astype(np.float32)}
        if site.has_e:
            packed["E"] = site.E[m].astype(np.float32)
        packed["A"] = site.A[m, :].astype(np.float32)
        sites.append(packed)
    return Payload(
        round=round,
        sample_count=sample_count,
        mask=[np.asarray(m, dtype=bool).copy() for m in mask],
        sites=sites,
        head_w=model.head_w.astype(np.float32),
        head_b=model.head_b.astype(np.float32),
        votes=None if votes is None else [np.asarray(v, dtype=bool).copy() for v in votes],
    )


def decode_apply(model: TinyModel, payload: Payload, mask) -> None:
    """Overwrite ``model`` from ``payload``: alive slots from the wire, dead slots zero."""
    if len(payload.mask) != len(mask) or any(
        not np.array_equal(a, np.asarray(b, dtype=bool)) for a, b in zip(payload.mask, mask)
    ):
        raise ContractError("payload mask differs from the expected mask")
    for site, m, packed in zip(model.sites, payload.mask, payload.sites):
        k = int(m.sum())
        if packed["B"].shape != (site.d_out, k) or packed["A"].shape != (k, site.d_in):
            raise CorruptPayloadError("site block does not match the mask")
        idx = np.flatnonzero(m)
        site.B[:] = 0.0
        site.A[:] = 0.0
        site.B[:, idx] = packed["B"]
        site.A[idx, :] = packed["A"]
        if site.has_e:
            site.E[:] = 0.0
            site.E[idx] = packed["E"]
        site.alive = m.copy()
    model.head_w[:] = payload.head_w
    model.head_b[:] = payload.head_b


def fedavg(payloads: Mapping[int, Payload], mask) -> Payload:
    """Sample-weighted mean of every transmitted value, summed in client-id order."""
    if not payloads:
        raise ContractError("fedavg needs at least one payload")
    ids = sorted(payloads)
    for cid in ids:
        p = payloads[cid]
        if len(p.mask) != len(mask) or any(not np.array_equal(a, b) for a, b in zip(p.mask, mask)):
            raise ContractError(f"client {cid} used a different mask")
    total = sum(payloads[cid].sample_count for cid in ids)
    if total <= 0:
        raise ContractError("sample counts sum to zero")

    def mean(get):
        acc = None
        for cid in ids:
            term = payloads[cid].sample_count * get(payloads[cid]).astype(np.float64)
            acc = term if acc is None else acc + term
        return acc / total

    first = payloads[ids[0]]
    sites = [
        {key: mean(lambda p, n=n, key=key: p.sites[n][key]) for key in first.sites[n]}
        for n in range(len(first.sites))
    ]
    return Payload(
        round=first.round,
        sample_count=total,
        mask=[np.asarray(m, dtype=bool).copy() for m in mask],
        sites=sites,
        head_w=mean(lambda p: p.head_w),
        head_b=mean(lambda p: p.head_b),
    )


def rank_detect(model: TinyModel, new_mask, module_pruning: bool = True) -> set[int]:
    """Apply ``new_mask`` and return sites whose live rank just fell to zero."""
    newly = set()
    for i, (site, m) in enumerate(zip(model.sites, new_mask)):
        before = live_rank(site)
        apply_mask(site, m)
        if before > 0 and live_rank(site) == 0:
            newly.add(i)
        if module_pruning and live_rank(site) == 0:
            model.frozen.add(i)
    return newly


def clients_select(rng: Rng, all_clients: int, k: int) -> list[int]:
    if k <= 0:
        raise ContractError("must select at least one client")
    if k > all_clients:
        raise ContractError(f"cannot select {k} of {all_clients} clients")
    return sorted(int(c) for c in rng.generator.choice(all_clients, size=k, replace=False))


@dataclass
class CommLedger:
    bytes_down: list = field(default_factory=list)
    bytes_up: list = field(default_factory=list)

    def record(self, down: int, up: int) -> None:
        if down < 0 or up < 0:
            raise ContractError("byte counts must be non-negative")
        self.bytes_down.append(int(down))
        self.bytes_up.append(int(up))

    @property
    def total_down(self) -> int:
        return sum(self.bytes_down)

    @property
    def total_up(self) -> int:
        return sum(self.bytes_up)

    @property
    def total(self) -> int:
        return self.total_down + self.total_up


@dataclass
class ServerState:
    model: TinyModel
    mask: list
    schedule: BudgetSchedule | None
    threshold: float
    rng: Rng
    config: ExperimentConfig
    val: Dataset
    round: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)
    digest: "hashlib._Hash" = field(default_factory=hashlib.sha256)

    @property
    def layout(self) -> WireLayout:
        return wire_layout(self.model)


@dataclass
class ClientState:
    cid: int
    shard: Dataset
    model: TinyModel | None = None
    frozen: set = field(default_factory=set)


@dataclass
class RoundRecord:
    round: int
    method: str
    bytes_up: int
    bytes_down: int
    train_loss: float
    val_acc: float
    avg_rank: float
    frozen_sites: int
    mag: float | None
    dir: float | None
    adapter_bytes: int = 0
    trainable_params: int = 0
    live_triplets: int = 0

    CSV_FIELDS = ("round", "method", "bytes_up", "bytes_down", "train_loss", "val_acc",
                  "avg_rank", "frozen_sites", "mag", "dir")

    def csv_row(self) -> list[str]:
        def num(x):
            return "" if x is None else f"{x:.6f}"

        return [str(self.round), self.method, str(self.bytes_up), str(self.bytes_down),
                num(self.train_loss), num(self.val_acc), num(self.avg_rank),
                str(self.frozen_sites), num(self.mag), num(self.dir)]


def client_train(server: ServerState, client: ClientState, broadcast: bytes, t: int):
    """One client's round, from received bytes to upload bytes.

    Pure in (server config, global model shape, client shard, round), so the
    order in which clients run never matters.
    """
    cfg = server.config
    layout = server.layout
    payload = Payload.from_bytes(broadcast, layout)
    model = server.model.clone()
    model.frozen = set()
    decode_apply(model, payload, payload.mask)
    if cfg.module_pruning:
        model.frozen = {i for i, s in enumerate(model.sites) if live_rank(s) == 0}
    client.model = model
    client.frozen = set(model.frozen)

    lr_t = cfg.lr * (1.0 - t / cfg.T)
    opt = OptState(lr=cfg.lr)
    trainable = trainable_param_count(model, cfg.module_pruning)
    loss = local_train(model, opt, client.shard, server.rng.fork(f"client/{client.cid}/round/{t}"),
                       lr_t, cfg.epochs_per_round, cfg.batch_size)
    votes = gen_local_mask(model.sites, t, server.schedule) if server.schedule is not None else None
    upload = comm_prune_encode(model, payload.mask, len(client.shard), t, votes)
    return upload.to_bytes(), loss, trainable


def run_round(server: ServerState, clients: Sequence[ClientState]) -> RoundRecord:
    cfg = server.config
    t = server.round
    if t >= cfg.T:
        raise ContractError(f"round {t} >= T={cfg.T}")
    layout = server.layout
    mask = server.mask
    selected = clients_select(server.rng.fork(f"select/{t}"), len(clients), cfg.clients_per_round)

    broadcast = comm_prune_encode(server.model, mask, 0, t).to_bytes()
    bytes_down = len(broadcast) * len(selected)
    server.digest.update(broadcast)

    uploads, losses, trainable = {}, [], []
    bytes_up = 0
    for cid in selected:
        raw, loss, n_train = client_train(server, clients[cid], broadcast, t)
        server.digest.update(raw)
        bytes_up += len(raw)
        uploads[cid] = Payload.from_bytes(raw, layout)
        losses.append(loss)
        trainable.append(n_train)

    with_votes = server.schedule is not None
    if bytes_down != len(selected) * payload_size(layout, mask) or bytes_up != len(selected) * payload_size(
        layout, mask, with_votes
    ):
        raise AssertionError(f"round {t}: ledger disagrees with the closed-form payload size")
    server.ledger.record(bytes_down, bytes_up)

    aggregated = fedavg(uploads, mask)
    decode_apply(server.model, aggregated, mask)

    site = cfg.discrepancy_site
    global_dw = delta_w(server.model.sites[site])
    local_dws = [delta_w(clients[cid].model.sites[site]) for cid in selected]
    mag = mag_discrepancy(global_dw, local_dws)
    try:
        direction = dir_discrepancy(global_dw, local_dws)
    except UndefinedMetricError:
        direction = None

    if server.schedule is not None:
        new_mask = arbitrate([uploads[cid].votes for cid in selected], server.threshold, mask)
        if not is_submask(new_mask, mask):
            raise AssertionError("arbitration revived a pruned triplet")
        rank_detect(server.model, new_mask, cfg.module_pruning)
        server.mask = new_mask
    for cid in selected:
        clients[cid].model = None

    ranks = [live_rank(s) for s in server.model.sites]
    record = RoundRecord(
        round=t,
        method=cfg.method,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        train_loss=float(np.mean(losses)),
        val_acc=evaluate(server.model, server.val),
        avg_rank=float(np.mean(ranks)),
        frozen_sites=sum(1 for r in ranks if r == 0),
        mag=mag,
        dir=direction,
        adapter_bytes=adapter_param_bytes(layout, mask),
        trainable_params=max(trainable),
        live_triplets=sum(ranks),
    )
    server.round += 1
    return record


@dataclass
class RunArtifact:
    config: ExperimentConfig
    records: list
    model: TinyModel
    mask: list
    test_acc: float
    ledger: CommLedger
    wire_digest: str


def load_data(cfg: ExperimentConfig, root: Rng) -> Dataset:
    if cfg.data_path:
        ds = load_csv(cfg.data_path)
        if ds.dim != cfg.d or ds.num_classes > cfg.classes:
            raise ContractError(
                f"{cfg.data_path}: data has d={ds.dim}, {ds.num_classes} classes; config has "
                f"d={cfg.d}, classes={cfg.classes}"
            )
        return Dataset(ds.features, ds.labels, cfg.classes)
    return gen_synthetic(root.fork("data"), cfg.n_samples, cfg.d, cfg.classes, cfg.margin)


def setup(cfg: ExperimentConfig):
    """Build the server and clients for ``cfg`` (no rounds run yet)."""
    root = Rng(cfg.seed)
    train, val, test = split(load_data(cfg, root), root.fork("split"))
    shards = partition(
        train,
        PartitionSpec(cfg.partition, cfg.num_clients, cfg.seed, cfg.alpha, cfg.labels_per_client),
    )
    pre = gen_synthetic(root.fork("pretrain-data"), cfg.pretrain_samples, cfg.d, cfg.classes, cfg.margin)
    bases = pretrain_base(root.fork("pretrain"), pre, cfg.pretrain_epochs)
    flavor = Flavor.LORA if cfg.method == "fedlora" else Flavor.TRUNC_SVD
    acfg = AdapterConfig(cfg.r_init, cfg.alpha_scale, flavor, cfg.init_std)
    model = build_model(root.fork("model"), bases, cfg.classes, acfg)
    schedule = None
    if cfg.method == "fedara":
        schedule = BudgetSchedule(cfg.b0, cfg.bT, cfg.t_w, cfg.t_f, cfg.T)
    server = ServerState(
        model=model,
        mask=[np.ones(cfg.r_init, dtype=bool) for _ in range(NUM_SITES)],
        schedule=schedule,
        threshold=cfg.T_h,
        rng=root.fork("server"),
        config=cfg,
        val=val,
    )
    clients = [ClientState(cid, train.subset(s)) for cid, s in enumerate(shards)]
    return server, clients, test


def run_experiment(cfg: ExperimentConfig, progress=None) -> RunArtifact:
    server, clients, test = setup(cfg)
    records = []
    for _ in range(cfg.T):
        rec = run_round(server, clients)
        records.append(rec)
        log.debug("round %d: val_acc=%.4f avg_rank=%.2f", rec.round, rec.val_acc, rec.avg_rank)
        if progress is not None:
            progress(rec)
    return RunArtifact(
        config=cfg,
        records=records,
        model=server.model,
        mask=server.mask,
        test_acc=evaluate(server.model, test),
        ledger=server.ledger,
        wire_digest=server.digest.hexdigest(),
    )


def final_ranks(artifact: RunArtifact) -> list[tuple[str, int]]:
    return [(name, live_rank(s)) for name, s in zip(SITE_NAMES, artifact.model.sites)]


def schedule_of(cfg: ExperimentConfig) -> BudgetSchedule:
    return BudgetSchedule(cfg.b0, cfg.bT, cfg.t_w, cfg.t_f, cfg.T)


@dataclass
class LrChoice:
    lr: float
    val_median: float
    artifacts: list
    val_by_lr: dict


def select_lr(cfg: ExperimentConfig, grid: Sequence[float], seeds: Sequence[int]) -> LrChoice:
    """Pick the learning rate with the best median final validation accuracy.

    Test accuracy is never looked at; ties go to the smaller rate.
    """
    if not grid or not seeds:
        raise ContractError("need a non-empty grid and seed list")
    best = None
    scores = {}
    for lr in sorted(grid):
        runs = [run_experiment(cfg.replace(lr=lr, seed=s)) for s in seeds]
        scores[lr] = float(np.median([a.records[-1].val_acc for a in runs]))
        if best is None or scores[lr] > best[1]:
            best = (lr, scores[lr], runs)
    return LrChoice(best[0], best[1], best[2], scores)
