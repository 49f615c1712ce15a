"""How much does adaptor depth matter when text and image spaces are nonlinearly related?

The synthetic generator puts g(e) = normalize(relu(R e)) on object cells. With
N = 0 the text embedding e is compared to g(e) directly; any N >= 1 can learn
something close to R. Takes about ten seconds.
"""
from jointdet.synth import SynthSpec, gen_corpus
from jointdet.training import layer_sweep

spec = SynthSpec(num_classes=16, dim=16, generator="nonlinear", noise=0.05, seed=1)
emb, train = gen_corpus(spec, 40)
_, held_out = gen_corpus(spec, 20, start=1000)   # different scene indices, same classes

acc = layer_sweep(emb, train, held_out, layers=(0, 1, 2, 3), steps=1500, lr=0.05)
for n, a in acc.items():
    print(f"N={n}  held-out cell accuracy {a:.3f}  " + "#" * int(40 * a))

# the same sweep on a linear corpus: depth should not be needed there
lin = SynthSpec(num_classes=16, dim=16, generator="linear", noise=0.05, seed=1)
emb, train = gen_corpus(lin, 20)
_, held_out = gen_corpus(lin, 10, start=1000)
print("linear corpus:", layer_sweep(emb, train, held_out, layers=(0, 1), steps=300, lr=0.05))
