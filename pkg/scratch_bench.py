"""Scratch: tune the 16x16 L=4 benchmark (DOLPH vs amplitude flow)."""
import numpy as np

from diffpr.cdp import add_noise_at_snr, make_cdp_operator
from diffpr.denoiser import AnalyticGaussianDenoiser, GaussianPrior
from diffpr.fields import substream
from diffpr.samplers import DolphConfig, amplitude_flow_baseline, dolph_run, recon_snr
from diffpr.schedule import make_linear_schedule

H = W = 16
L = 4
MASTER = 7


def run_cell(snr_db, seed, T, gamma, af_step, af_iters):
    op = make_cdp_operator((H, W), L, substream(MASTER, "masks"))
    x_true = substream(MASTER, "image").standard_normal((1, H, W))
    clean = op.amplitudes(x_true)
    meas = add_noise_at_snr(clean, snr_db, substream(MASTER, "noise", str(snr_db)))

    sched = make_linear_schedule(T)
    model = AnalyticGaussianDenoiser(GaussianPrior(0.0, 1.0))
    rng_d = substream(MASTER, "chain", seed, str(snr_db), "dolph")
    x_dolph = dolph_run(meas, op, model, sched, DolphConfig(gamma=gamma), rng_d)

    rng_a = substream(MASTER, "chain", seed, str(snr_db), "af")
    x_init = rng_a.standard_normal((1, H, W))
    x_af = amplitude_flow_baseline(meas, op, x_init, af_step, af_iters)

    return recon_snr(x_true, x_dolph), recon_snr(x_true, x_af)


def sweep(T, gamma, af_step, af_iters, seeds=range(10)):
    for snr in (25.0, 15.0):
        d, a = zip(*(run_cell(snr, s, T, gamma, af_step, af_iters) for s in seeds))
        print(f"snr={snr:5.1f} T={T} gamma={gamma} af_step={af_step} af_iters={af_iters} | "
              f"dolph med={np.median(d):6.2f} (min {min(d):6.2f}) | "
              f"af med={np.median(a):6.2f} (min {min(a):6.2f})")


if __name__ == "__main__":
    import time
    tic = time.time()
    sweep(T=200, gamma=0.1, af_step=0.2, af_iters=200)
    print(f"[{time.time()-tic:.1f}s]")
    sweep(T=200, gamma=0.2, af_step=0.2, af_iters=200)
    print(f"[{time.time()-tic:.1f}s]")
