"""
Noising, clean-latent estimates and DDIM steps
==============================================

Walks through the closed-form pieces the sampler is built from, on the
standard linear schedule with T = 1000.
"""

import math

import torch

from iide_lab.diffusion import (ScheduleConfig, add_noise, build_schedule, ddim_loop, ddim_step, predict_z0,
                                timestep_plan)

sched = build_schedule(ScheduleConfig(T=1000, beta_start=1e-4, beta_end=0.02))
print(f"alpha_bar at t=1: {sched.alpha_bar(1):.6f}, at t=500: {sched.alpha_bar(500):.4f}, "
      f"at t=1000: {sched.alpha_bar(1000):.3e}")

# Noising then reading the clean latent back with the true noise is exact.
g = torch.Generator().manual_seed(0)
z0 = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
eps = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
zt = add_noise(z0, eps, 600, sched)
print("recovery error at t=600:", float((predict_z0(zt, eps, 600, sched) - z0).abs().max()))

# A DDIM step re-noises the clean estimate to the earlier timestep with the same noise.
step = ddim_step(zt, eps, 600, 400, sched)
print("step vs re-noised estimate:", float((step - add_noise(z0, eps, 400, sched)).abs().max()))

# With a noise predictor that knows z0, the whole 50-step loop lands on z0.
plan = timestep_plan(1000, 50)
print("plan head/tail:", plan[:4], "...", plan[-3:])


def oracle(z, t):
    a = sched.alpha_bar(t)
    return (z - math.sqrt(a) * z0) / math.sqrt(1 - a)


z_T = add_noise(z0, eps, 1000, sched)
print("oracle sampling error:", float((ddim_loop(oracle, z_T, plan, sched) - z0).abs().max()))
