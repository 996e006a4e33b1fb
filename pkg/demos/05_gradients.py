"""Checking the analytic gradient against central differences.

Region placement and argmax cells are chosen once and held fixed; the
loss is then a smooth function of the attention values and the two
gradients should agree to round-off.
"""
# %%
import numpy as np

from attnguide.grad import (GRADCHECK_TOKENS, finite_diff_gradient, frozen_loss_fn, gradcheck,
                            loss_gradient, random_stack, roundoff_resolution)

stack = random_stack(seed=0)
analytic = loss_gradient(stack, GRADCHECK_TOKENS).values
fn = frozen_loss_fn(stack, GRADCHECK_TOKENS)
numeric = finite_diff_gradient(fn, stack.values, eps=1e-6)
diff = np.abs(analytic - numeric)
print(f"largest gradient entry {np.abs(analytic).max():.3e}")
print(f"largest difference     {diff.max():.3e}")
print(f"round-off floor        {roundoff_resolution(fn(stack.values), 1e-6):.3e}")

# %% gradcheck packs the same comparison into a report.
rep = gradcheck(stack, GRADCHECK_TOKENS)
print(rep.as_dict())
