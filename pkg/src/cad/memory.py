"""Structural accounting of training memory per fine-tuning mode.

A manifest is the op graph of one training step: every node carries its
parameter count, whether those parameters train, its output size, and how many
elements its backward rule keeps (the table in :mod:`cad.ops`). A node needs
its saved elements exactly when gradient reaches it, i.e. when it owns
trainable parameters or sits downstream of a node that does.
"""

from __future__ import annotations

from collections import deque
from functools import lru_cache
from dataclasses import asdict, dataclass, field

import numpy as np

from cad.adapter import AdapterConfig, adapter_forward, apply_adapter
from cad.backbone import BackboneConfig, InBlockAdapterConfig, backbone_forward, init_backbone
from cad.errors import ManifestError
from cad.model import build_model, normalize_mode
from cad.seg import DecoderConfig, decoder_forward, seg_loss
from cad.spectral import HfcConfig, build_adapter_input
from cad.tensor import Tensor, recording

MIB = 1024 * 1024


@dataclass
class MemNode:
    name: str
    param_count: int = 0
    trainable: bool = False
    out_elems: int = 0
    saved_elems: int = 0


@dataclass
class MemoryManifest:
    nodes: list[MemNode]
    edges: list[tuple[int, int]]
    batch_size: int = 1
    bytes_per_elem: int = 4
    label: str = ""


@dataclass
class MemoryReport:
    trainable_params: int
    frozen_params: int
    retained_activation_bytes: int
    param_bytes: int
    grad_bytes: int
    optimizer_state_bytes: int
    total_bytes: int
    label: str = ""
    grad_nodes: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("grad_nodes")
        return out


def _topo(manifest: MemoryManifest) -> tuple[list[int], list[list[int]]]:
    n = len(manifest.nodes)
    preds: list[list[int]] = [[] for _ in range(n)]
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, b in manifest.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise ManifestError(f"edge {(a, b)} references a missing node")
        succ[a].append(b)
        preds[b].append(a)
    indeg = [len(p) for p in preds]
    queue = deque(i for i in range(n) if indeg[i] == 0)
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if len(order) != n:
        raise ManifestError("manifest graph has a cycle")
    sinks = [i for i in range(n) if not succ[i]]
    if len(sinks) != 1:
        names = [manifest.nodes[i].name for i in sinks]
        raise ManifestError(f"manifest needs exactly one sink, found {len(sinks)}: {names[:5]}")
    return order, preds


def analyze(manifest: MemoryManifest) -> MemoryReport:
    if not manifest.nodes:
        raise ManifestError("empty manifest")
    order, preds = _topo(manifest)
    rg = [False] * len(manifest.nodes)
    for i in order:
        rg[i] = manifest.nodes[i].trainable or any(rg[p] for p in preds[i])
    bpe = manifest.bytes_per_elem
    trainable = sum(nd.param_count for nd in manifest.nodes if nd.trainable)
    frozen = sum(nd.param_count for nd in manifest.nodes if not nd.trainable)
    saved = sum(nd.saved_elems for nd, r in zip(manifest.nodes, rg) if r)
    retained = manifest.batch_size * bpe * saved
    param_bytes = (trainable + frozen) * bpe
    grad_bytes = trainable * bpe
    opt_bytes = 2 * trainable * bpe
    return MemoryReport(
        trainable_params=trainable,
        frozen_params=frozen,
        retained_activation_bytes=retained,
        param_bytes=param_bytes,
        grad_bytes=grad_bytes,
        optimizer_state_bytes=opt_bytes,
        total_bytes=param_bytes + grad_bytes + opt_bytes + retained,
        label=manifest.label,
        grad_nodes=[nd.name for nd, r in zip(manifest.nodes, rg) if r],
    )


def manifest_from_trace(trace, batch_size: int = 1, bytes_per_elem: int = 4, label: str = "") -> MemoryManifest:
    """Turn a recorded op trace (batch of one) into a manifest.

    Named leaf inputs are parameters and fold into the consuming node; other
    leaves are data and contribute no node.
    """
    index: dict[int, int] = {}
    nodes: list[MemNode] = []
    edges: list[tuple[int, int]] = []
    for entry in trace.entries:
        params = [t for t in entry.inputs if t.op == "leaf" and t.name is not None]
        tag = params[0].name.rsplit(".", 1)[0] if params else ""
        node = MemNode(
            name=f"{entry.op}[{tag}]" if tag else entry.op,
            param_count=sum(t.size for t in params),
            trainable=any(t.requires_grad for t in params),
            out_elems=entry.output.size,
            saved_elems=entry.saved_elems,
        )
        me = len(nodes)
        nodes.append(node)
        index[id(entry.output)] = me
        for t in entry.inputs:
            src = index.get(id(t))
            if src is not None:
                edges.append((src, me))
    return MemoryManifest(nodes, edges, batch_size=batch_size, bytes_per_elem=bytes_per_elem, label=label)


@lru_cache(maxsize=8)
def _frozen_backbone(cfg: BackboneConfig):
    # read-only during tracing, so one copy serves every mode at this config
    return init_backbone(cfg)


def manifest_from_model(
    mode: str,
    backbone_cfg: BackboneConfig,
    adapter_cfg: AdapterConfig,
    decoder_cfg: DecoderConfig,
    image_size: int = 64,
    batch_size: int = 1,
    inblock_cfg: InBlockAdapterConfig = InBlockAdapterConfig(),
) -> MemoryManifest:
    """Trace one training step of the assembled toy model in ``mode``."""
    mode = normalize_mode(mode)
    model = build_model(
        mode, backbone_cfg, adapter_cfg, decoder_cfg, HfcConfig(), seed=0, inblock_cfg=inblock_cfg,
        backbone=_frozen_backbone(backbone_cfg),
    )
    image = np.zeros((1, 3, image_size, image_size), np.float32)
    image[..., ::2, :] = 1.0
    target = np.zeros((1, 1, image_size, image_size), np.float32)
    with recording() as trace:
        emb = backbone_forward(Tensor(image), model.backbone, model.inblock)
        if mode == "cad":
            inp = build_adapter_input(image, model.hfc_cfg)
            emb = apply_adapter(emb, adapter_forward(inp, model.adapter, adapter_cfg, train=True))
        seg_loss(decoder_forward(emb, model.decoder, decoder_cfg), target)
    return manifest_from_trace(trace, batch_size=batch_size, label=mode)


def report_for(
    mode: str,
    backbone_cfg: BackboneConfig,
    adapter_cfg: AdapterConfig,
    decoder_cfg: DecoderConfig,
    image_size: int = 64,
    batch_size: int = 1,
) -> MemoryReport:
    return analyze(manifest_from_model(mode, backbone_cfg, adapter_cfg, decoder_cfg, image_size, batch_size))


@dataclass(frozen=True)
class ReferenceRow:
    table: str
    backbone: str
    batch_size: int
    module: str
    trainable_params: int
    memory_mib: int


def reference_tables() -> list[ReferenceRow]:
    """Published trainable-parameter and GPU-memory figures for the real models (display only)."""
    rows = [
        ("Table 1", "ViT-B", 4, "SAM Decoder", 4_058_340, 14_113),
        ("Table 1", "ViT-B", 4, "SAM Adapter", 4_788_740, 36_871),
        ("Table 1", "ViT-B", 4, "SAM Conv Adapter", 5_831_908, 17_697),
        ("Table 2", "ViT-H", 2, "SAM Decoder", 4_058_340, 14_329),
        ("Table 2", "ViT-H", 2, "SAM Adapter", 6_091_908, 42_623),
        ("Table 2", "ViT-H", 2, "SAM Conv Adapter", 5_831_908, 15_457),
    ]
    return [ReferenceRow(*r) for r in rows]


MODE_LABELS = {"decoder": "Decoder only", "inblock": "In-block adapter", "cad": "Conv adapter (CAD)"}


def render_table(reports: dict[str, MemoryReport], depth: int, batch_size: int) -> str:
    """Rows in the layout of the published comparison, plus retained activations."""
    head = f"{'Module':<22}{'Trainable Parameters':>22}{'Retained Act. (MiB)':>22}{'Modeled Memory (MiB)':>23}"
    lines = [f"Toy model, depth {depth}, batch size {batch_size}", head, "-" * len(head)]
    for mode in ("decoder", "inblock", "cad"):
        r = reports[mode]
        lines.append(
            f"{MODE_LABELS[mode]:<22}{r.trainable_params:>22,}"
            f"{r.retained_activation_bytes / MIB:>22.3f}{r.total_bytes / MIB:>23.3f}"
        )
    lines += ["", "Reference (published, real SAM; not reproduced here)"]
    for row in reference_tables():
        lines.append(
            f"  {row.table} {row.backbone} bs={row.batch_size}  {row.module:<18}"
            f"{row.trainable_params:>12,} params {row.memory_mib:>8,} MiB"
        )
    return "\n".join(lines)
