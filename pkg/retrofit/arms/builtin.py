"""
Built-in benchmark arms.

These arms compare retrieval + deformation recipes on the same corpus split:
- static: undeformed-chamfer retrieval, pretrained deformation
- dar_df: deformation-aware retrieval over a frozen pretrained deformation
- uniform: joint training with uniformly sampled candidates
- ours / ours_ido: joint training with soft retrieval (optionally IDO-distilled)
- ours_do: "ours" plus test-time direct optimisation
"""

from functools import partial

from ..evalbench import EvalResult, static_rank
from . import ArmContext, arm


@arm(name="static", description="nearest source by undeformed chamfer, pretrained deformation")
def static(ctx: ArmContext) -> EvalResult:
    return ctx.evaluate(partial(static_rank, ctx.db), ctx.pretrained())


@arm(name="dar_df", description="deformation-aware retrieval trained over a frozen pretrained deformation")
def dar_df(ctx: ArmContext) -> EvalResult:
    space, net = ctx.trained("dar_df", train_deformation=False)
    return ctx.evaluate(space.ranking, net)


@arm(name="uniform", description="joint training, candidates sampled uniformly")
def uniform(ctx: ArmContext) -> EvalResult:
    space, net = ctx.trained("uniform", sampling="uniform")
    return ctx.evaluate(space.ranking, net)


@arm(name="ours", description="joint training with biased soft retrieval")
def ours(ctx: ArmContext) -> EvalResult:
    space, net = ctx.trained("ours", sampling="biased")
    return ctx.evaluate(space.ranking, net)


@arm(name="ours_ido", description="joint training with biased soft retrieval and IDO distillation")
def ours_ido(ctx: ArmContext) -> EvalResult:
    space, net = ctx.trained("ours_ido", sampling="biased", use_ido=True)
    return ctx.evaluate(space.ranking, net)


@arm(name="ours_do", description="ours, refining the top retrieved sources by direct optimisation")
def ours_do(ctx: ArmContext) -> EvalResult:
    space, net = ctx.trained("ours", sampling="biased")
    return ctx.evaluate(space.ranking, net, direct=True)
