#pragma once

#include "polyrank/embedding.hpp"
#include "polyrank/kkt.hpp"
#include "polyrank/matrix_polynomial.hpp"
#include "polyrank/problem_io.hpp"
#include "polyrank/rank_factorization.hpp"
#include "polyrank/solver.hpp"
#include "polyrank/structure.hpp"
