"""
Finite differences against autograd on the full GRPO loss
=========================================================

The loss couples token log-ratios, denoising log-ratios and two KL terms;
gradients reach the generator directly and the language model through the
connector. A central-difference sweep checks every parameter group, and two
controls show what a broken graph and a frozen group look like.
"""

from jointrl.models import freeze
from jointrl.verify import gradient_test_model, verify_grad

# a partial sweep keeps this quick; `jointrl verify grad` checks every entry
ENTRIES = 48

print("-- intact model")
print("\n".join(verify_grad(max_entries=ENTRIES).lines()))

print("\n-- connector cut out of the graph")
broken = gradient_test_model()
broken.connector.detach_params = True
print("\n".join(verify_grad(broken, max_entries=ENTRIES).lines()))

print("\n-- language model frozen")
print("\n".join(verify_grad(freeze(gradient_test_model(), "lm"), max_entries=ENTRIES).lines()))
