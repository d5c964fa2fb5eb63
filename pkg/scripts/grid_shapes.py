"""Print distribution grid shapes next to a brute-force floor(log_b(mx))."""

from fractions import Fraction

from chainsight.distributions import LOG2, builtin_configs


def brute(base, mx):
    b, g, p = Fraction(str(base)), 0, Fraction(str(base))
    while p <= Fraction(mx):
        g, p = g + 1, p * b
    return g


def main():
    for c in builtin_configs():
        print(f"{c.name:40s} {c.shape}  brute=({brute(c.scl1.base, c.mx1)}, {brute(c.scl2.base, c.mx2)})")
    print(f"{'accountBalanceDistribution':40s} (3, {LOG2.group_count(10**26)})  brute=(3, {brute(2, 10**26)})")


if __name__ == "__main__":
    main()
