"""
Building a hypergraph store from a synthetic manifold
======================================================

A planted manifold is generated, written to JSONL, read back, and turned
into a store: near-duplicate EHR nodes are merged, every node goes into the
HNSW index, and the four hyperedge families are induced.
"""

import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from hyperwalker.ibrochure import EdgeKind
from hyperwalker.manifold import Modality
from hyperwalker.workbench import SyntheticSpec, build_store, generate_manifold, ingest_jsonl, write_jsonl

# a small manifold: 40 subjects with 3 studies each, some duplicated EHR rows
spec = SyntheticSpec(dims=32, n_subjects=40, studies_per_subject=3, duplicate_rate=0.3, seed=0)
records, truth = generate_manifold(spec)
print(Counter(r.modality for r in records))

# records travel as JSON lines; float16 storage is allowed and widened on ingest
tmp = Path(tempfile.mkdtemp())
write_jsonl(tmp / "records.jsonl", records, precision="float16")
records = ingest_jsonl(tmp / "records.jsonl", dims=32)

store = build_store(records)
print(len(records), "records ->", len(store.nodes), "nodes after pruning")

merged = [n for n in store.nodes.values() if n.merged_from]
print("representatives that absorbed duplicates:", len(merged))
print("example:", merged[0].node_id, "absorbed", merged[0].merged_from)

###############################################################################
# Hyperedges and the incidence matrix

print(Counter(e.kind.value for e in store.edges.values()))
node_ids, edge_ids, H = store.incidence_matrix()
print("H has shape", H.shape, "and", int((H > 0).sum()), "non-zero entries")

# every report is tethered to its closest knowledge node
report = store.ids_by_modality(Modality.REPORT)[0]
anchor = store.edges[f"dis:{report}"]
(kb_id,) = anchor.members - {report}
print(report, "->", kb_id, "similarity", round(anchor.weights[kb_id], 3))

###############################################################################
# Neighbourhoods and raw index queries

reach = store.expand_neighborhood(report, depth=2)
print("within two hyperedges of", report, ":", Counter(reach.values()))

hits = store.index.search(store.nodes[report].embedding, k=5)
for node_id, dist in hits:
    print(f"  {node_id:<14} distance {dist:.3f}")

sim_edges = [e for e in store.edges.values() if e.kind is EdgeKind.SIMILARITY]
sizes = np.array([len(e.members) for e in sim_edges])
print("similarity edges:", len(sim_edges), "mean size", sizes.mean().round(2) if len(sizes) else 0)
