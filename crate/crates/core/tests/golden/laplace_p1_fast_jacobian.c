/*
 * a: cell integral on the triangle, quadrature degree 0 (1 point).
 * A: output, 3 x 3, row-major. Entries are added to; the kernel zeroes its block first.
 * coords: nodal coordinates, 3 x 2 row-major.
 */
void a(double *restrict A, const double *restrict coords)
{
  static const double T0[3] = {-1.0000000000000000e0, 1.0000000000000000e0, 0.0000000000000000e0};
  static const double T1[3] = {-1.0000000000000000e0, 0.0000000000000000e0, 1.0000000000000000e0};
  static const double T2[1] = {5.0000000000000000e-1};
  double t0;
  double t1;
  double t2;
  double t3;
  double t4[2][2];
  double t5;
  double t6[2];
  double t7[3][2];
  double t8[2];
  double t9[2];
  double t10[3][3];
  double t11;
  t0 = coords[2] - coords[0];
  t1 = coords[4] - coords[0];
  t2 = coords[3] - coords[1];
  t3 = coords[5] - coords[1];
  t4[0][0] = t3;
  t4[0][1] = -t1;
  t4[1][0] = -t2;
  t4[1][1] = t0;
  t5 = t0 * t3 - t1 * t2;
  for (int k = 0; k < 3; ++k)
  {
    t6[0] = T0[k];
    t6[1] = T1[k];
    for (int i2 = 0; i2 < 2; ++i2)
    {
      t7[k][i2] = 0.0;
    }
    for (int i0 = 0; i0 < 2; ++i0)
    {
      for (int i2 = 0; i2 < 2; ++i2)
      {
        t7[k][i2] += t4[i0][i2] / t5 * t6[i0];
      }
    }
  }
  for (int j = 0; j < 3; ++j)
  {
    t8[0] = T0[j];
    t8[1] = T1[j];
    for (int i2 = 0; i2 < 2; ++i2)
    {
      t9[i2] = 0.0;
    }
    for (int i1 = 0; i1 < 2; ++i1)
    {
      for (int i2 = 0; i2 < 2; ++i2)
      {
        t9[i2] += t4[i1][i2] / t5 * t8[i1];
      }
    }
    for (int k = 0; k < 3; ++k)
    {
      t10[j][k] = 0.0;
      for (int i2 = 0; i2 < 2; ++i2)
      {
        t10[j][k] += t7[k][i2] * t9[i2];
      }
      A[j * 3 + k] = 0.0;
    }
  }
  for (int q = 0; q < 1; ++q)
  {
    t11 = T2[q] * fabs(t5);
    for (int j = 0; j < 3; ++j)
    {
      for (int k = 0; k < 3; ++k)
      {
        A[j * 3 + k] += t11 * t10[j][k];
      }
    }
  }
}
