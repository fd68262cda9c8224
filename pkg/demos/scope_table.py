"""Efficiency table for the attention layouts at full width and 256x256 input.

    python3 demos/scope_table.py
"""

from drtanet.network import ModelConfig, count_stats

MODES = ["fixed(1)", "fixed(3)", "fixed(5)", "fixed(7)", "drtam"]


def main():
    print(f"{'layout':<18}{'MACs (G)':>10}{'params (M)':>12}{'w/o emb. (M)':>14}")
    for mode in MODES:
        for chva in (False, True):
            s = count_stats(ModelConfig(attention_mode=mode, chva=chva))
            name = mode + (" + CHVA" if chva else "")
            print(f"{name:<18}{s.mac_count / 1e9:>10.3f}{s.param_count / 1e6:>12.3f}{s.non_embedding_param_count / 1e6:>14.3f}")


if __name__ == "__main__":
    main()
