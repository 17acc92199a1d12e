"""Randomized synthetic record sets for the evaluation and report tests."""

from iqadefbench.evaluation import CertRecord, EvaluationRecord

METRICS = ("toy-7", "toy-8")
ATTACKS = ("ifgsm", "square")
STRENGTHS = ("weak", "medium")


def random_records(rng, n_images=6, case="non_adaptive", defenses=(("none", ""), ("flip", "")),
                   metrics=METRICS, attacks=ATTACKS, strengths=STRENGTHS, diam=100.0):
    mos = {f"img{i:02d}": float(rng.uniform(1, 5)) for i in range(n_images)}
    out = []
    for name, param in defenses:
        did = name if not param else f"{name}@{param}"
        for m in metrics:
            src = {k: float(rng.uniform(10, 90)) for k in mos}
            clean = {k: float(v + rng.normal(0, 3)) for k, v in src.items()}
            for a in attacks:
                for s in strengths:
                    for img, y in mos.items():
                        adv = src[img] + float(rng.uniform(0, 20))
                        out.append(EvaluationRecord(
                            metric_id=m, attack_id=a, strength=s, defense_id=did, defense_name=name,
                            defense_param=param, case=case, image_id=img, mos=y, diam=diam,
                            score_source=src[img], score_adv=adv, score_def_adv=adv + float(rng.normal(0, 4)),
                            score_def_clean=clean[img], q_ssim=float(rng.uniform(0.5, 1.0)),
                            q_psnr=float(rng.uniform(20, 40)), seed=int(rng.integers(1 << 30)),
                            wall_time_ms=float(rng.uniform(0.1, 5.0))))
    return out


def random_cert_records(rng, n_images=6, defense_ids=("RS", "MS")):
    mos = {f"img{i:02d}": float(rng.uniform(1, 5)) for i in range(n_images)}
    out = []
    for did in defense_ids:
        kind = "regression" if did.endswith("MS") else "classification"
        for m in METRICS:
            for a in ATTACKS:
                for img, y in mos.items():
                    clean = float(rng.uniform(10, 90))
                    abst = int(kind == "classification" and rng.random() < 0.3)
                    out.append(CertRecord(
                        metric_id=m, attack_id=a, strength="medium", defense_id=did, kind=kind, image_id=img,
                        mos=y, diam=100.0, smoothed_clean=clean, smoothed_adv=clean + float(rng.normal(0, 5)),
                        radius=float("nan") if (abst or kind == "regression") else float(rng.uniform(0, 0.3)),
                        abstained=abst,
                        relative_delta=float(rng.uniform(0, 0.1)) if kind == "regression" else float("nan"),
                        samples=500, sigma=0.12, alpha=0.001, seed=int(rng.integers(1 << 30)),
                        wall_time_ms=float(rng.uniform(1, 10))))
    return out
