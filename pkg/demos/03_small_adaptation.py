"""
A small adaptation run
======================

Pretrain on labelled clean clouds with the self-supervised terms, then run
a few self-training rounds on the corrupted domain. Takes about a minute.
"""

from tam.evaluation import evaluate
from tam.geometry import SynthConfig, generate_domain_pair
from tam.implicit import ImplicitConfig
from tam.models import ModelBundle, ModelConfig
from tam.posenc import PosEncConfig
from tam.prepare import prepare
from tam.selftrain import SelfTrainConfig, TrainConfig, pretrain, run_self_training

pe = PosEncConfig(d0=12)
imp = ImplicitConfig(n_query=8, k_part=32)
S, T = generate_domain_pair(SynthConfig(points_per_cloud=256, samples_per_class=30, seed=0))
PS, PT = prepare(S, pe, imp), prepare(T, pe, imp)
print("prepared", len(PS), "source and", len(PT), "target clouds")

model = ModelBundle(ModelConfig(global_dim=pe.out_dim), seed=0, posenc=pe)
for row in pretrain(model, PS, PT, TrainConfig(epochs=5)):
    print(f"epoch {row['epoch']}: source CE {row['source']:.3f}, mix {row['mix']:.3f}, "
          f"implicit {row['imp']:.3f}, train acc {row['train_acc']:.3f}")
print("after pretraining, target accuracy", evaluate(model, PT).accuracy)

# target labels are only used to print accuracy
rows = run_self_training(model, PS, PT, SelfTrainConfig(rounds=3, epochs_per_round=1, theta0=0.6),
                         evaluate=lambda b, d: evaluate(b, d).accuracy)
for row in rows:
    print(f"round {row['round']}: theta {row['theta']:.3f}, selected {row['selected_count']}, "
          f"target acc {row['target_acc']:.3f}")
