#pragma once

#include "softfem/errors.hpp"
#include "softfem/mesh.hpp"
#include "softfem/constitutive.hpp"
#include "softfem/dynamics.hpp"
#include "softfem/adjoint.hpp"
#include "softfem/damplab.hpp"
#include "softfem/calibrate.hpp"
#include "softfem/harness.hpp"
