"""Three ways of segmenting one phantom subject, side by side.

* unregistered: majority vote of the other subjects' ground truth as is
* pairwise: each of those atlases registered to the target on intensity alone
* oracle: groupwise run where every non-target subject carries its ground truth

    python demos/atlas_baselines.py [seed]
"""

import sys

from icseg.metrics import evaluate
from icseg.phantom import PhantomSpec, make_population
from icseg.pipeline import RegistrationConfig, majority_vote, oracle_mode, pairwise_baseline
from icseg.volume import argmax_labels

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
subjects = make_population(PhantomSpec.from_preset("weak", seed=seed))
target, others = subjects[0], subjects[1:]
cfg = RegistrationConfig(seed=seed)

results = {
    "target prior": argmax_labels(target.prior),
    "unregistered": majority_vote([s.gt for s in others]),
    "pairwise": pairwise_baseline(target.image, [(s.image, s.gt) for s in others], cfg),
    "oracle": oracle_mode([s.image for s in subjects], [None] + [s.gt for s in others], 0, target.prior, cfg),
}
print("method         " + "  ".join(f"Dice s{c}" for c in (1, 2, 3)) + "   mean")
for name, seg in results.items():
    rep = evaluate(seg, target.gt)
    per = [rep.values[c]["dice"] for c in (1, 2, 3)]
    print(f"{name:<14} " + "  ".join(f"{d:>7.3f}" for d in per) + f"  {rep.mean('dice'):.3f}")
