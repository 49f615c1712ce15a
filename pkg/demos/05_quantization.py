"""Per-row symmetric INT8/INT16 weights for the vocabulary kernel."""
import numpy as np

from jointdet.adaptor import AdaptorConfig, init_params
from jointdet.quant import dequantize, drift_report, quantize_kernel
from jointdet.synth import SynthSpec, foreground_cells, gen_corpus
from jointdet.vocab import build_vocab

spec = SynthSpec(num_classes=80, dim=64, noise=0.1, seed=0)
emb, scenes = gen_corpus(spec, 10)
pack = build_vocab(emb, init_params(AdaptorConfig(0, 64)))
cells, _ = foreground_cells(scenes)
print(len(cells), "object cells,", pack.num_classes, "classes")

for mode in ("int8", "int16"):
    q = quantize_kernel(pack, mode)
    err = np.abs(dequantize(q) - pack.kernel)
    rep = drift_report(pack, q, cells)
    print(f"{mode:5s}  worst error / scale {np.max(err / q.scales[:, None]):.3f}  "
          f"max logit drift {rep.max_abs_delta:.2e}  top-1 agreement {rep.top1_agreement:.4f}")

# the first rows of the per-class drift CSV
print("\n".join(drift_report(pack, quantize_kernel(pack, "int8"), cells).to_csv().splitlines()[:4]))
