# Copyright 2024 Tarkan Al-Kazily

MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(seed: int) -> int:
    """
    One step of the splitmix64 generator, used to expand a user seed into a non-zero state.

        z = (seed + 0x9E3779B97F4A7C15) mod 2^64
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2^64
        return z ^ (z >> 31)
    """
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """
    xorshift64* pseudo random generator.

    State update for a 64-bit state x (all arithmetic mod 2^64):

        x ^= x >> 12
        x ^= x << 25
        x ^= x >> 27
        output = x * 0x2545F4914F6CDD1D

    The state is seeded with splitmix64(seed), replaced by 1 in the (unlikely) zero case.
    Uniform doubles take the top 53 output bits. The sequence is identical on every platform,
    which keeps fixture models reproducible.

    Attributes:
        state: Current 64-bit state
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * XorShift64Star.MULTIPLIER) & MASK64

    def random(self) -> float:
        """
        Returns:
            Uniform double in [0, 1)
        """
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, high: int) -> int:
        """
        Args:
            high: Exclusive upper bound, must be positive.

        Returns:
            Integer in [0, high), by multiply-shift on the top 32 bits.
        """
        if high <= 0:
            raise ValueError(f"randint upper bound must be positive, got {high}")
        return ((self.next_u64() >> 32) * high) >> 32

    def uniform_list(self, count: int, scale: float) -> list[float]:
        """
        Args:
            count: Number of values to draw
            scale: Values are drawn from U(-scale, scale)

        Returns:
            List of draws in generation order.
        """
        return [(2.0 * self.random() - 1.0) * scale for _ in range(count)]
