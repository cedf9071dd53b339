"""Fixed comparison pattern for the 256-bit binary descriptor.

Each row is (x1, y1, x2, y2) in pixels relative to the keypoint, inside a
disk of radius 13 so every rotation stays within the 15 px patch.
Generated once from a seeded Gaussian (sigma = 31/5); do not regenerate.
"""

PATTERN = (
    (-1, -3, 1, -11), (2, -2, -5, 1), (-12, -1, -5, 3), (3, -6, -6, -9),
    (-5, 2, 5, 1), (0, -5, 1, -5), (1, -1, 5, 1), (8, -3, 5, 1),
    (-5, 0, -9, -7), (-3, -2, -12, -5), (-1, -1, -4, 0), (-3, 7, -5, 0),
    (-3, 5, -6, 5), (-7, -8, -3, 1), (-9, -3, 0, 0), (5, 5, 2, 6),
    (-4, 4, -3, 4), (-7, 4, -8, 2), (-1, -3, 1, -4), (7, 7, -7, 1),
    (3, -6, 7, 5), (11, 2, 6, 11), (1, -3, -9, 2), (-8, 7, 1, 5),
    (1, 8, -3, 0), (9, -8, 1, 6), (-7, -4, -8, 7), (-1, -2, -9, -7),
    (6, -1, -2, 5), (-6, 10, -2, -3), (-2, 0, 4, -4), (-5, 0, 2, 5),
    (-3, 6, -6, 9), (-7, -1, 1, 6), (9, 0, 12, -5), (2, -1, 4, -6),
    (-7, 8, 7, 3), (-4, 4, 3, 8), (1, -10, -1, 0), (5, -2, -7, 7),
    (2, -7, -4, 6), (-8, 6, 0, -1), (5, -3, 0, 10), (-5, 11, -10, -5),
    (6, -4, -2, 5), (6, 3, -3, 4), (1, 7, 2, -5), (-1, -10, 4, 3),
    (0, -8, -2, 4), (-1, 1, 7, 4), (7, -9, -2, 8), (4, 0, -6, 2),
    (0, 5, 2, 5), (-9, -5, 1, 2), (-4, -4, 0, 1), (12, -2, 3, -11),
    (-1, -2, -8, -6), (-4, -5, -12, -2), (-1, -2, 5, -1), (1, 0, 1, -7),
    (-2, 11, 2, -1), (-3, 2, 0, 1), (5, 1, -1, -4), (-8, 3, 2, -4),
    (-3, -7, -6, -2), (0, 5, 3, -3), (5, -12, -2, 3), (-10, 0, 2, -2),
    (-5, 12, 10, 2), (9, -5, -8, 2), (11, -1, 5, 8), (0, 5, -4, 8),
    (2, 0, -1, -2), (12, -1, -1, 0), (-7, -3, -2, 2), (9, 4, 5, 1),
    (3, 2, -2, -6), (3, 2, -4, 0), (-7, 2, 4, -8), (4, 2, 8, -8),
    (-2, 0, -1, -2), (-3, 10, -2, 7), (-1, 4, 7, 3), (-6, -2, 0, -7),
    (-3, -11, 2, -2), (4, -2, 2, 4), (-5, -9, 11, 4), (-9, 6, -3, 8),
    (-2, 7, -1, -5), (4, 2, -5, 1), (-4, 11, 4, -1), (-5, -6, 10, -1),
    (-1, -1, -3, 4), (-4, -5, 7, -3), (-5, 2, -3, 0), (-4, -5, 4, 0),
    (-4, -1, 1, -8), (2, 3, -4, 2), (-12, -3, 4, -2), (6, 1, 1, -12),
    (-9, -2, -1, 6), (-3, -6, -7, -10), (2, -4, -7, -3), (-4, 8, -2, 1),
    (-3, 9, -3, -2), (-8, 2, 1, 9), (-2, 2, -5, -1), (0, 4, 6, -7),
    (-6, -2, -3, -3), (-9, 0, -3, 1), (1, -6, 2, 3), (-10, 4, -3, 1),
    (0, -3, -11, 0), (-4, -2, 9, -9), (-4, 4, -4, 11), (-6, 0, 6, -4),
    (3, 1, 0, 6), (-9, -8, -4, 5), (4, -1, 4, -8), (-4, 4, 9, -3),
    (0, -6, -4, 1), (3, -6, -2, 4), (8, -8, -3, -2), (-2, 2, -2, 1),
    (8, 8, -3, -1), (3, -2, -3, -6), (-4, -6, -5, -4), (-1, 11, 10, 2),
    (3, 4, 0, -2), (9, -9, 7, -6), (2, 2, -1, 5), (-7, 1, 8, 1),
    (-1, -5, -1, 1), (-5, -3, -3, 0), (4, 1, 5, -1), (4, -1, -6, -7),
    (-8, 2, 5, 0), (10, 0, 1, 1), (-3, 0, 5, -5), (-1, 1, 1, -1),
    (-4, -2, 0, -3), (-2, -5, -5, 7), (-6, -6, 9, 2), (-7, 5, -3, 5),
    (-6, 4, 12, -4), (6, -7, 7, -9), (9, -5, 1, -4), (11, 3, -6, 5),
    (-2, -6, -7, 8), (1, 6, 3, 3), (-3, 12, -6, 10), (1, 6, 3, -6),
    (4, 0, -3, 0), (1, -2, -6, -3), (8, -10, 0, 1), (2, -2, -7, -2),
    (1, -8, 6, -1), (-8, -6, 3, 6), (1, -2, -4, -4), (-6, -1, 7, 0),
    (-3, -3, 4, 3), (-4, 0, 1, -2), (-3, 3, 10, 3), (6, -2, 3, 7),
    (6, 3, -5, -12), (1, -8, 7, -7), (9, 3, -1, 6), (5, 1, 2, 5),
    (-3, 3, 4, 4), (7, 4, 13, 0), (1, 1, -5, 0), (-4, 2, -3, -3),
    (3, 1, -8, -6), (-8, 0, -7, 8), (-5, 3, 8, 0), (-5, -7, -4, -7),
    (-7, 0, 4, 7), (-4, -4, -1, 3), (-5, 2, -1, 6), (5, 8, -2, -5),
    (5, 3, 6, -3), (-12, -3, -1, 6), (7, -9, 1, 1), (3, 7, 3, 5),
    (9, 0, -1, -9), (-8, 5, 9, 3), (0, 3, 2, 8), (1, -3, 7, 4),
    (-1, 2, 2, -3), (0, -11, 1, -5), (2, 8, 3, -2), (0, -4, -11, 1),
    (4, 3, 7, 0), (8, 7, -7, 9), (-10, 0, -9, -3), (-4, 4, -4, 6),
    (-1, -5, 0, -7), (3, -3, -1, 7), (6, -4, 2, -9), (-1, -2, -9, 5),
    (-11, -4, 10, 2), (4, 3, -4, 6), (-6, -4, 2, 6), (5, -2, 9, 3),
    (12, -4, -5, -2), (8, 0, -1, 0), (3, -3, -5, 1), (-7, -1, -7, -5),
    (-5, -4, 5, 9), (3, -2, -4, 1), (5, 2, 5, 9), (-3, 6, -1, 7),
    (7, -2, -4, -3), (-5, 4, 3, -1), (11, -2, 0, -1), (-2, -6, -4, 4),
    (4, 8, 5, 1), (-1, 7, -2, -1), (-4, -7, 2, -7), (8, -4, 1, -5),
    (-5, -8, 2, 0), (8, 1, 4, 3), (4, 6, 1, -8), (-4, -3, 3, 1),
    (0, -3, 10, 6), (7, 0, 2, 3), (-11, 0, -1, 3), (-1, -8, 4, 0),
    (-8, 0, -3, -2), (7, 3, 4, -5), (-1, -9, -8, 10), (-4, -1, -10, -2),
    (2, -2, 1, -5), (-5, 9, 5, -4), (-1, 3, 2, -5), (-4, -7, 3, 5),
    (4, 1, -4, -4), (0, -6, 9, -4), (7, 8, -8, 2), (1, -2, 4, -5),
    (-5, -7, 0, 0), (3, -6, -3, -3), (-10, -5, 1, 0), (-7, -9, -6, 4),
    (-5, -4, -6, -6), (7, -3, 5, 4), (1, 9, -6, 1), (-8, -3, -9, -3),
    (1, -2, -4, -7), (-5, 0, -8, 4), (0, 6, -12, 2), (2, -2, 11, 3),
    (-4, -3, 5, -5), (-6, -8, 1, -7), (7, 6, 2, 5), (-4, -7, 7, 4),
)
