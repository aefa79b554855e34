"""GPU hours needed to recover private images end to end.

Without an encoding defense one batch inversion is enough. Against
InstaHide the attacker must invert every batch of every tapped epoch, train a
similarity network and cluster all N*T encodings, and the clustering term is
quadratic in N*T. That term is what makes the defense expensive to break at
scale, not the per-batch attack.

    python demos/cost_of_breaking_instahide.py
"""
from gradinv.cost import CostInputs, cost_table, estimate_hours, format_table


def main():
    print(format_table(cost_table()))
    for N in (5_000, 50_000, 500_000):
        c = CostInputs(N=N)
        nt = c.N * c.T
        cluster = (1 / 6) * (nt / 5e3) ** 2
        share = cluster / estimate_hours(c)
        print(f"N={N:>7,}: clustering is {share:6.1%} of the total")
    print()
    print("fewer tapped epochs (T=10):")
    print(format_table(cost_table(T=10)))


if __name__ == "__main__":
    main()
