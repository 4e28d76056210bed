"""Fine-tune the toy classifiers with stale BN statistics, frozen vs updated."""

from threadpoolctl import threadpool_limits

from adderkit.trainer.classify import train_toy_classifier

with threadpool_limits(1):
    for arch in ("conv", "adder"):
        for policy in ("frozen", "unfrozen"):
            rec = train_toy_classifier(arch, policy, seed=0)
            print(f"{arch:5s} {policy:8s} loss {rec.loss[0]:.3f} -> {rec.final_loss():.4f} "
                  f"sparsity {rec.metrics['last_block_sparsity']:.3f} "
                  f"bn mean TV {rec.bn_mean_total_variation():.1f}")
